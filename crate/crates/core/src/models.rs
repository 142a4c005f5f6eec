//! Toy patch-token backbone and the three task heads.
//!
//! Every head consumes the same prompted sequence `[prefix ‖ body ‖ suffix]`.
//! The spatial heads add the mean prompt token to each body token before
//! their per-token projection, so the prompt reaches every output pixel
//! while the spatial reshape only sees body tokens.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Prompted;
use crate::image::Image;
use crate::metrics::{self, MetricError};
use crate::synthdata::Sample;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            dim: 32,
            depth: 2,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng).with_requires_grad(true)
}

fn zeros(rows: usize, cols: usize) -> Tensor {
    Tensor::zeros(&[rows, cols]).with_requires_grad(true)
}

/// Self-attention over tokens plus a ReLU MLP, each with a residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl Block {
    fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w_q: gaussian(dim, dim, rng),
            w_k: gaussian(dim, dim, rng),
            w_v: gaussian(dim, dim, rng),
            w_o: gaussian(dim, dim, rng),
            w_1: gaussian(dim, 2 * dim, rng),
            b_1: zeros(1, 2 * dim),
            w_2: gaussian(2 * dim, dim, rng),
            b_2: zeros(1, dim),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.b_1, &self.w_2, &self.b_2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

/// Forward pass of one block given its bound parameters in
/// [`Block::tensors`] order.
pub fn block_forward(tape: &mut Tape, x: Var, p: &[Var]) -> tensor::Result<Var> {
    let [w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2] = p else {
        return Err(TensorError::Contract(format!("block needs 8 parameters, got {}", p.len())));
    };
    let d = tape.shape(x)[1] as f64;
    let q = tape.matmul(x, *w_q)?;
    let k = tape.matmul(x, *w_k)?;
    let v = tape.matmul(x, *w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(logits);
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.matmul(mixed, *w_o)?;
    let x = tape.add(x, mixed)?;
    let h = tape.matmul(x, *w_1)?;
    let h = tape.add_row(h, *b_1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, *w_2)?;
    let h = tape.add_row(h, *b_2)?;
    tape.add(x, h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dim: usize,
    /// `(patch_size²·C) × d`.
    pub embed: Tensor,
    pub embed_bias: Tensor,
    /// Learned positional embedding, `L × d`.
    pub position: Tensor,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(config: &BackboneConfig, height: usize, width: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let p = config.patch_size;
        if p == 0 || config.dim == 0 || channels == 0 {
            return Err(ModelError::Config("patch_size, dim and channels must be positive".into()));
        }
        if height == 0 || width == 0 || height % p != 0 || width % p != 0 {
            return Err(ModelError::Config(format!(
                "image {height}x{width} is not divisible by patch size {p}"
            )));
        }
        let tokens = (height / p) * (width / p);
        let fan_in = p * p * channels;
        Ok(Self {
            patch_size: p,
            height,
            width,
            channels,
            dim: config.dim,
            embed: gaussian(fan_in, config.dim, rng),
            embed_bias: zeros(1, config.dim),
            position: Tensor::randn(&[tokens, config.dim], 0.1, rng).with_requires_grad(true),
            blocks: (0..config.depth).map(|_| Block::init(config.dim, rng)).collect(),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.embed_bias, &self.position];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.embed_bias, &mut self.position];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    /// Row-major patches, each flattened channel-major then row-major.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        if image.height() != self.height || image.width() != self.width || image.channels() != self.channels {
            return Err(ModelError::Config(format!(
                "backbone expects {}x{}x{} images, got {}x{}x{}",
                self.height,
                self.width,
                self.channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let p = self.patch_size;
        let (gh, gw) = self.grid();
        let mut data = Vec::with_capacity(gh * gw * p * p * self.channels);
        for ty in 0..gh {
            for tx in 0..gw {
                for c in 0..self.channels {
                    for y in 0..p {
                        for x in 0..p {
                            data.push(image.get(c, ty * p + y, tx * p + x));
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![gh * gw, p * p * self.channels], data)?)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.param(t)).collect()
    }

    /// `r = g_φ(x)`: `L × d` tokens from an `L × p²C` patch matrix.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], patches: Var) -> tensor::Result<Var> {
        if vars.len() != 3 + 8 * self.blocks.len() {
            return Err(TensorError::Contract("backbone bound with the wrong parameter count".into()));
        }
        let x = tape.matmul(patches, vars[0])?;
        let x = tape.add_row(x, vars[1])?;
        let mut x = tape.add(x, vars[2])?;
        for chunk in vars[3..].chunks(8) {
            x = block_forward(tape, x, chunk)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
    SuperResolution,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
            TaskKind::SuperResolution => "super_resolution",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub sr_scale: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            num_classes: 4,
            sr_scale: 2,
        }
    }
}

/// Personalized task head `h_ψ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub dim: usize,
    pub num_classes: usize,
    pub scale: usize,
    pub patch_size: usize,
    pub grid: (usize, usize),
    /// `d × out` with `out` = classes, 1, or `(scale·patch)²`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub fn ids(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

impl TaskHead {
    pub fn init<R: Rng + ?Sized>(config: &HeadConfig, backbone: &Backbone, rng: &mut R) -> Result<Self> {
        let out = match config.kind {
            TaskKind::Classification if config.num_classes < 2 => {
                return Err(ModelError::Config("classification needs at least 2 classes".into()))
            }
            TaskKind::Classification => config.num_classes,
            TaskKind::Segmentation => 1,
            TaskKind::SuperResolution if config.sr_scale == 0 => {
                return Err(ModelError::Config("sr_scale must be positive".into()))
            }
            TaskKind::SuperResolution => (config.sr_scale * backbone.patch_size).pow(2),
        };
        Ok(Self {
            kind: config.kind,
            dim: backbone.dim,
            num_classes: config.num_classes,
            scale: config.sr_scale,
            patch_size: backbone.patch_size,
            grid: backbone.grid(),
            weight: gaussian(backbone.dim, out, rng),
            bias: zeros(1, out),
        })
    }

    pub fn task(&self) -> &'static str {
        self.kind.name()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    /// Shape of the prediction produced by [`TaskHead::forward`].
    pub fn output_shape(&self) -> [usize; 2] {
        let (gh, gw) = self.grid;
        let p = self.patch_size;
        match self.kind {
            TaskKind::Classification => [1, self.num_classes],
            TaskKind::Segmentation => [gh * p, gw * p],
            TaskKind::SuperResolution => [gh * p * self.scale, gw * p * self.scale],
        }
    }

    /// `h_ψ(r′)`: class logits (`1 × C`), mask logits (`H × W`) or the
    /// upscaled image (`sH × sW`).
    pub fn forward(&self, tape: &mut Tape, vars: &HeadVars, seq: &Prompted) -> tensor::Result<Var> {
        let (gh, gw) = self.grid;
        if seq.body_len != gh * gw {
            return Err(TensorError::Contract(format!(
                "head expects {} body tokens, got {}",
                gh * gw,
                seq.body_len
            )));
        }
        match self.kind {
            TaskKind::Classification => {
                let pooled = tape.mean_rows(seq.tokens)?;
                let logits = tape.matmul(pooled, vars.weight)?;
                tape.add_row(logits, vars.bias)
            }
            TaskKind::Segmentation | TaskKind::SuperResolution => {
                let body = contextual_body(tape, seq)?;
                let out = tape.matmul(body, vars.weight)?;
                let out = tape.add_row(out, vars.bias)?;
                let [h, w] = self.output_shape();
                let index = if self.kind == TaskKind::Segmentation {
                    upsample_index(gh, gw, self.patch_size)
                } else {
                    pixel_shuffle_index(gh, gw, self.patch_size * self.scale)
                };
                tape.gather(out, index, &[h, w])
            }
        }
    }

    /// Standard task objective for one sample.
    pub fn loss(&self, tape: &mut Tape, prediction: Var, sample: &Sample) -> tensor::Result<Var> {
        match self.kind {
            TaskKind::Classification => tape.cross_entropy(prediction, &[sample.class_id]),
            TaskKind::Segmentation => {
                let target: Vec<f64> = sample.mask.iter().map(|&m| f64::from(m)).collect();
                tape.bce_with_logits(prediction, &target)
            }
            TaskKind::SuperResolution => {
                let shape = tape.shape(prediction).to_vec();
                let target = tape.constant(&shape, sample.hr.data().to_vec())?;
                tape.mse(prediction, target)
            }
        }
    }

    /// Names of the metrics returned by [`TaskHead::evaluate`].
    pub fn metric_names(&self) -> [&'static str; 2] {
        match self.kind {
            TaskKind::Classification => ["accuracy", "macro_f1"],
            TaskKind::Segmentation => ["dice", "iou"],
            TaskKind::SuperResolution => ["psnr", "ssim"],
        }
    }

    /// Task metrics over `(prediction values, sample)` pairs. Segmentation
    /// and SR metrics are per-sample means.
    pub fn evaluate(&self, outputs: &[(Vec<f64>, &Sample)]) -> Result<Vec<(&'static str, f64)>> {
        if outputs.is_empty() {
            return Err(ModelError::Config("evaluation needs at least one sample".into()));
        }
        let names = self.metric_names();
        let (a, b) = match self.kind {
            TaskKind::Classification => {
                let preds: Vec<usize> = outputs.iter().map(|(v, _)| argmax(v)).collect();
                let targets: Vec<usize> = outputs.iter().map(|(_, s)| s.class_id).collect();
                metrics::accuracy_macro_f1(&preds, &targets, self.num_classes)?
            }
            TaskKind::Segmentation => {
                let mut sums = (0.0, 0.0);
                for (v, s) in outputs {
                    let pred: Vec<u8> = v.iter().map(|&z| u8::from(z > 0.0)).collect();
                    let (d, i) = metrics::dice_iou(&pred, &s.mask)?;
                    sums = (sums.0 + d, sums.1 + i);
                }
                (sums.0 / outputs.len() as f64, sums.1 / outputs.len() as f64)
            }
            TaskKind::SuperResolution => {
                let [h, w] = self.output_shape();
                let mut sums = (0.0, 0.0);
                for (v, s) in outputs {
                    let pred: Vec<f64> = v.iter().map(|x| x.clamp(0.0, 1.0)).collect();
                    sums.0 += metrics::psnr(&pred, s.hr.data())?;
                    sums.1 += metrics::ssim(&pred, s.hr.data(), h, w)?;
                }
                (sums.0 / outputs.len() as f64, sums.1 / outputs.len() as f64)
            }
        };
        Ok(vec![(names[0], a), (names[1], b)])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Body tokens, each shifted by the mean prompt token when prompts exist.
fn contextual_body(tape: &mut Tape, seq: &Prompted) -> tensor::Result<Var> {
    let body = if seq.prompt_len() == 0 {
        return Ok(seq.tokens);
    } else {
        tape.slice_rows(seq.tokens, seq.prefix_len, seq.body_len)?
    };
    let mut parts = Vec::with_capacity(2);
    if seq.prefix_len > 0 {
        parts.push(tape.slice_rows(seq.tokens, 0, seq.prefix_len)?);
    }
    if seq.suffix_len > 0 {
        parts.push(tape.slice_rows(seq.tokens, seq.prefix_len + seq.body_len, seq.suffix_len)?);
    }
    let prompt = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let ctx = tape.mean_rows(prompt)?;
    tape.add_row(body, ctx)
}

/// Nearest-neighbor upsampling of a `(gh·gw) × 1` logit column to
/// `(gh·p) × (gw·p)`.
pub fn upsample_index(gh: usize, gw: usize, p: usize) -> Rc<[usize]> {
    let (h, w) = (gh * p, gw * p);
    (0..h * w).map(|i| (i / w / p) * gw + (i % w) / p).collect()
}

/// Pixel shuffle of a `(gh·gw) × q²` matrix (one `q × q` block per token,
/// row-major within the block) to a `(gh·q) × (gw·q)` image.
pub fn pixel_shuffle_index(gh: usize, gw: usize, q: usize) -> Rc<[usize]> {
    let (h, w) = (gh * q, gw * q);
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let token = (y / q) * gw + x / q;
            token * q * q + (y % q) * q + x % q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::prefix_suffix_concat;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_backbone(h: usize, w: usize, depth: usize) -> Backbone {
        let cfg = BackboneConfig { patch_size: 4, dim: 6, depth };
        Backbone::init(&cfg, h, w, 1, &mut rng(1)).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::gray(h, w, (0..h * w).map(|_| r.gen()).collect()).unwrap()
    }

    fn sample_for(h: usize, w: usize, scale: usize, seed: u64) -> Sample {
        let mut r = rng(seed);
        Sample {
            image: random_image(h, w, seed),
            class_id: 1,
            modality: 0,
            mask: (0..h * w).map(|_| u8::from(r.gen_bool(0.3))).collect(),
            hr: random_image(h * scale, w * scale, seed + 1),
        }
    }

    #[test]
    fn token_count_and_determinism() {
        let bb = small_backbone(8, 8, 2);
        assert_eq!(bb.num_tokens(), 4);
        let img = random_image(8, 8, 3);
        let run = || {
            let mut tape = Tape::new();
            let vars = bb.bind(&mut tape);
            let patches = bb.patchify(&img).unwrap();
            let x = tape.param(&patches);
            let r = bb.forward(&mut tape, &vars, x).unwrap();
            (tape.shape(r).to_vec(), tape.value(r).to_vec())
        };
        let (shape, a) = run();
        assert_eq!(shape, vec![4, 6]);
        assert_eq!(a, run().1);
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let cfg = BackboneConfig::default();
        assert!(matches!(Backbone::init(&cfg, 10, 8, 1, &mut rng(0)), Err(ModelError::Config(_))));
    }

    #[test]
    fn patchify_layout() {
        let bb = small_backbone(8, 8, 0);
        let img = Image::gray(8, 8, (0..64).map(f64::from).collect()).unwrap();
        let p = bb.patchify(&img).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        // token 1 is the top-right patch
        assert_eq!(&p.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(p.data()[20], 12.0);
    }

    #[test]
    fn backbone_gradient_through_one_block() {
        let bb = small_backbone(8, 8, 1);
        let patches = bb.patchify(&random_image(8, 8, 4)).unwrap();
        let mut inputs: Vec<Tensor> = bb.tensors().into_iter().cloned().collect();
        inputs.push(patches.with_requires_grad(true));
        let err = check_gradients(&inputs, |tape, v| {
            let n = v.len() - 1;
            let r = bb.forward(tape, &v[..n], v[n])?;
            let sq = tape.mul(r, r)?;
            Ok(tape.mean(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zeroed_classifier_is_uniform() {
        let bb = small_backbone(8, 8, 1);
        let cfg = HeadConfig { kind: TaskKind::Classification, num_classes: 5, sr_scale: 2 };
        let mut head = TaskHead::init(&cfg, &bb, &mut rng(2)).unwrap();
        head.weight = Tensor::zeros(&[6, 5]);
        head.bias = Tensor::zeros(&[1, 5]);
        let mut tape = Tape::new();
        let hv = head.bind(&mut tape);
        let r = tape.param(&Tensor::randn(&[4, 6], 1.0, &mut rng(3)));
        let seq = prefix_suffix_concat(&mut tape, None, r, None).unwrap();
        let logits = head.forward(&mut tape, &hv, &seq).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let loss = head.loss(&mut tape, logits, &sample_for(8, 8, 2, 1)).unwrap();
        assert!((tape.value(loss)[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spatial_output_shapes() {
        let bb = small_backbone(8, 8, 1);
        for (kind, shape) in [(TaskKind::Segmentation, vec![8, 8]), (TaskKind::SuperResolution, vec![16, 16])] {
            let cfg = HeadConfig { kind, num_classes: 4, sr_scale: 2 };
            let head = TaskHead::init(&cfg, &bb, &mut rng(2)).unwrap();
            let mut tape = Tape::new();
            let hv = head.bind(&mut tape);
            let r = tape.param(&Tensor::randn(&[4, 6], 1.0, &mut rng(3)));
            let pre = tape.param(&Tensor::randn(&[1, 6], 1.0, &mut rng(4)));
            let suf = tape.param(&Tensor::randn(&[2, 6], 1.0, &mut rng(5)));
            let seq = prefix_suffix_concat(&mut tape, Some(pre), r, Some(suf)).unwrap();
            let out = head.forward(&mut tape, &hv, &seq).unwrap();
            assert_eq!(tape.shape(out), &shape[..]);
            assert_eq!(head.output_shape().to_vec(), shape);
        }
    }

    #[test]
    fn pixel_shuffle_matches_naive_rearrangement() {
        let (gh, gw, q) = (2, 3, 4);
        let src: Vec<f64> = (0..gh * gw * q * q).map(|i| i as f64).collect();
        // naive: walk tokens and their blocks, write into the output image
        let (h, w) = (gh * q, gw * q);
        let mut naive = vec![f64::NAN; h * w];
        for ty in 0..gh {
            for tx in 0..gw {
                let t = ty * gw + tx;
                for by in 0..q {
                    for bx in 0..q {
                        naive[(ty * q + by) * w + tx * q + bx] = src[t * q * q + by * q + bx];
                    }
                }
            }
        }
        let index = pixel_shuffle_index(gh, gw, q);
        let shuffled: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        assert_eq!(shuffled, naive);
        let up = upsample_index(2, 2, 2);
        assert_eq!(&up[..], &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn losses_at_their_minimum() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 3], vec![-50.0, 50.0, -50.0]).unwrap();
        let ce = tape.cross_entropy(logits, &[1]).unwrap();
        assert!(tape.value(ce)[0] < 1e-12);
        let bb = small_backbone(8, 8, 0);
        let cfg = HeadConfig { kind: TaskKind::SuperResolution, num_classes: 4, sr_scale: 2 };
        let head = TaskHead::init(&cfg, &bb, &mut rng(1)).unwrap();
        let s = sample_for(8, 8, 2, 9);
        let pred = tape.constant(&[16, 16], s.hr.data().to_vec()).unwrap();
        let l = head.loss(&mut tape, pred, &s).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
    }

    #[test]
    fn head_losses_match_reference_formulas() {
        // reference computed with naive sums in a different association order
        let bb = small_backbone(8, 8, 0);
        let s = sample_for(8, 8, 2, 11);
        let mut r = rng(12);
        let logits: Vec<f64> = (0..64).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let cfg = HeadConfig { kind: TaskKind::Segmentation, num_classes: 4, sr_scale: 2 };
        let head = TaskHead::init(&cfg, &bb, &mut rng(1)).unwrap();
        let pred = tape.constant(&[8, 8], logits.clone()).unwrap();
        let l = head.loss(&mut tape, pred, &s).unwrap();
        let mut reference = 0.0;
        for (z, &m) in logits.iter().zip(&s.mask).rev() {
            let p = 1.0 / (1.0 + (-z).exp());
            let t = f64::from(m);
            reference -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        reference /= 64.0;
        assert!((tape.value(l)[0] - reference).abs() < 1e-12);

        let cfg = HeadConfig { kind: TaskKind::Classification, num_classes: 4, sr_scale: 2 };
        let head = TaskHead::init(&cfg, &bb, &mut rng(1)).unwrap();
        let z = [0.3, -1.2, 2.5, 0.1];
        let pred = tape.constant(&[1, 4], z.to_vec()).unwrap();
        let l = head.loss(&mut tape, pred, &s).unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        assert!((tape.value(l)[0] - (denom.ln() - z[1])).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_for_every_kind() {
        let bb = small_backbone(8, 8, 1);
        let s = sample_for(8, 8, 2, 21);
        for kind in [TaskKind::Classification, TaskKind::Segmentation, TaskKind::SuperResolution] {
            let cfg = HeadConfig { kind, num_classes: 4, sr_scale: 2 };
            let head = TaskHead::init(&cfg, &bb, &mut rng(7)).unwrap();
            let mut r = rng(8);
            let inputs = vec![
                head.weight.clone(),
                head.bias.clone().with_requires_grad(true),
                Tensor::randn(&[1, 6], 1.0, &mut r).with_requires_grad(true),
                Tensor::randn(&[4, 6], 1.0, &mut r).with_requires_grad(true),
                Tensor::randn(&[2, 6], 1.0, &mut r).with_requires_grad(true),
            ];
            let err = check_gradients(&inputs, |tape, v| {
                let seq = prefix_suffix_concat(tape, Some(v[2]), v[3], Some(v[4]))?;
                let hv = HeadVars { weight: v[0], bias: v[1] };
                let pred = head.forward(tape, &hv, &seq)?;
                head.loss(tape, pred, &s)
            })
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: relative error {err}");
        }
    }

    #[test]
    fn evaluation_metrics() {
        let bb = small_backbone(8, 8, 0);
        let s = sample_for(8, 8, 2, 31);
        let seg = TaskHead::init(&HeadConfig { kind: TaskKind::Segmentation, ..HeadConfig::default() }, &bb, &mut rng(1)).unwrap();
        let perfect: Vec<f64> = s.mask.iter().map(|&m| if m == 1 { 5.0 } else { -5.0 }).collect();
        assert_eq!(seg.evaluate(&[(perfect, &s)]).unwrap(), vec![("dice", 1.0), ("iou", 1.0)]);
        let sr = TaskHead::init(&HeadConfig { kind: TaskKind::SuperResolution, ..HeadConfig::default() }, &bb, &mut rng(1)).unwrap();
        let m = sr.evaluate(&[(s.hr.data().to_vec(), &s)]).unwrap();
        assert_eq!(m[0], ("psnr", metrics::PSNR_CAP_DB));
        let cls = TaskHead::init(&HeadConfig::default(), &bb, &mut rng(1)).unwrap();
        assert_eq!(cls.evaluate(&[(vec![0.0, 1.0, 0.0, 0.0], &s)]).unwrap()[0], ("accuracy", 1.0));
    }
}
