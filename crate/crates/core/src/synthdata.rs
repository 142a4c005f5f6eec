//! Synthetic multi-modality imaging data.
//!
//! A scene is a sum of 2–4 Gaussian blobs ("anatomy"); its class is the
//! size bucket of the dominant blob. A modality renders a scene through a
//! monotone gamma curve, adds an oriented sinusoidal carrier at or above half
//! the Nyquist rate, and adds pixel noise. Two renderings of one scene
//! therefore differ mostly at high frequencies, which is what the low-pass
//! spectral tokens are meant to ignore.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub id: usize,
    /// Carrier frequency as a fraction of the Nyquist rate.
    pub carrier: f64,
    /// Carrier direction in radians.
    pub orientation: f64,
    pub amplitude: f64,
    pub noise_scale: f64,
    /// Exponent of the intensity transfer `v ↦ v^gamma`.
    pub gamma: f64,
}

impl ModalitySpec {
    /// A modality that renders the scene unchanged.
    pub fn identity(id: usize) -> Self {
        Self {
            id,
            carrier: 0.5,
            orientation: 0.0,
            amplitude: 0.0,
            noise_scale: 0.0,
            gamma: 1.0,
        }
    }

    pub fn transfer(&self, v: f64) -> f64 {
        v.powf(self.gamma)
    }
}

/// Evenly spread carriers, orientations and gamma curves for `n` modalities.
pub fn default_modalities(n: usize) -> Vec<ModalitySpec> {
    const GAMMAS: [f64; 4] = [1.0, 0.9, 1.1, 0.95];
    (0..n)
        .map(|id| ModalitySpec {
            id,
            carrier: 0.6 + 0.3 * (id % 3) as f64 / 2.0,
            orientation: PI * id as f64 / n.max(1) as f64,
            amplitude: 0.15,
            noise_scale: 0.03,
            gamma: GAMMAS[id % GAMMAS.len()],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Center in normalized `[0, 1]` coordinates.
    pub cy: f64,
    pub cx: f64,
    /// Standard deviation in normalized units.
    pub sigma: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: usize,
    pub blobs: Vec<Blob>,
}

/// Dominant-blob radius per class bucket.
pub fn class_sigma(class_id: usize, num_classes: usize) -> f64 {
    0.07 + 0.09 * class_id as f64 / (num_classes.max(2) - 1) as f64
}

/// Random scene of the given class.
pub fn sample_scene<R: Rng + ?Sized>(class_id: usize, num_classes: usize, rng: &mut R) -> SceneSpec {
    let sigma = class_sigma(class_id, num_classes) * rng.gen_range(0.92..1.08);
    let mut blobs = vec![Blob {
        cy: rng.gen_range(0.3..0.7),
        cx: rng.gen_range(0.3..0.7),
        sigma,
        intensity: rng.gen_range(0.65..0.9),
    }];
    let extra = rng.gen_range(1..=3);
    for _ in 0..extra {
        blobs.push(Blob {
            cy: rng.gen_range(0.1..0.9),
            cx: rng.gen_range(0.1..0.9),
            sigma: rng.gen_range(0.03..0.06),
            intensity: rng.gen_range(0.2..0.45),
        });
    }
    SceneSpec { class_id, blobs }
}

/// Blob field sampled at pixel centers, clipped to `[0, 1]`.
pub fn render(scene: &SceneSpec, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let field: f64 = scene
                .blobs
                .iter()
                .map(|b| {
                    let d2 = (v - b.cy).powi(2) + (u - b.cx).powi(2);
                    b.intensity * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum();
            out[y * width + x] = field.clamp(0.0, 1.0);
        }
    }
    out
}

/// Segmentation threshold on the rendered blob field.
pub const MASK_THRESHOLD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class_id: usize,
    pub modality: usize,
    /// Binary `H × W` mask of the thresholded blob field.
    pub mask: Vec<u8>,
    /// Clean (texture- and noise-free) rendering at `hr_scale ×` resolution.
    pub hr: Image,
}

/// Renders one scene under one modality.
pub fn generate_sample<R: Rng + ?Sized>(
    scene: &SceneSpec,
    modality: &ModalitySpec,
    height: usize,
    width: usize,
    hr_scale: usize,
    rng: &mut R,
) -> Sample {
    let field = render(scene, height, width);
    let phase = rng.gen_range(0.0..2.0 * PI);
    // carrier frequency in radians per pixel: carrier · π at Nyquist
    let omega = modality.carrier * PI;
    let (dy, dx) = (modality.orientation.sin(), modality.orientation.cos());
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let base = modality.transfer(field[y * width + x]);
            let texture = if modality.amplitude == 0.0 {
                0.0
            } else {
                modality.amplitude * (omega * (x as f64 * dx + y as f64 * dy) + phase).sin()
            };
            let noise = if modality.noise_scale == 0.0 {
                0.0
            } else {
                modality.noise_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            };
            pixels.push((base + texture + noise).clamp(0.0, 1.0));
        }
    }
    let mask = field.iter().map(|&v| u8::from(v > MASK_THRESHOLD)).collect();
    let hr_scale = hr_scale.max(1);
    let hr_pixels = render(scene, height * hr_scale, width * hr_scale)
        .into_iter()
        .map(|v| modality.transfer(v))
        .collect();
    Sample {
        image: Image::gray(height, width, pixels).expect("positive geometry"),
        class_id: scene.class_id,
        modality: modality.id,
        mask,
        hr: Image::gray(height * hr_scale, width * hr_scale, hr_pixels).expect("positive geometry"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    pub num_samples: usize,
    pub hr_scale: usize,
    /// Explicit modality specs; defaults to [`default_modalities`].
    pub modalities: Option<Vec<ModalitySpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 4,
            num_modalities: 3,
            num_samples: 2000,
            hr_scale: 2,
            modalities: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image geometry must be positive");
        }
        if self.num_classes == 0 || self.num_modalities == 0 {
            return bad("num_classes and num_modalities must be positive");
        }
        if self.hr_scale == 0 {
            return bad("hr_scale must be positive");
        }
        if let Some(m) = &self.modalities {
            if m.len() != self.num_modalities {
                return bad("modalities list length differs from num_modalities");
            }
            if m.iter().any(|s| s.carrier < 0.5 || s.gamma <= 0.0) {
                return bad("modality carriers must be >= 0.5 Nyquist and gammas positive");
            }
        }
        Ok(())
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        self.modalities.clone().unwrap_or_else(|| default_modalities(self.num_modalities))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub hr_scale: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    pub fn modalities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.modality).collect()
    }
}

/// One scene rendered under two modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    pub a: Sample,
    pub b: Sample,
}

/// Draws probe pair `pair_id`: a random scene and two modalities, distinct
/// unless `allow_same` is set (or only one modality exists).
pub fn probe_pair(config: &DataConfig, seed: u64, pair_id: u64, allow_same: bool) -> Result<ProbePair> {
    config.validate()?;
    let specs = config.modality_specs();
    let m = specs.len();
    let mut rng = stream(seed, Stream::Probe, pair_id, 0);
    let scene = sample_scene(rng.gen_range(0..config.num_classes), config.num_classes, &mut rng);
    let i = rng.gen_range(0..m);
    let j = if allow_same || m == 1 { rng.gen_range(0..m) } else { (i + rng.gen_range(1..m)) % m };
    let a = generate_sample(&scene, &specs[i], config.height, config.width, 1, &mut rng);
    let b = generate_sample(&scene, &specs[j], config.height, config.width, 1, &mut rng);
    Ok(ProbePair { a, b })
}

/// Sample `i` draws its class uniformly and uses modality `i mod M`; each
/// sample has its own random stream.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let specs = config.modality_specs();
    let samples = (0..config.num_samples)
        .map(|i| {
            let mut rng = stream(seed, Stream::Sample, i as u64, 0);
            let class = rng.gen_range(0..config.num_classes);
            let scene = sample_scene(class, config.num_classes, &mut rng);
            let modality = &specs[i % specs.len()];
            generate_sample(&scene, modality, config.height, config.width, config.hr_scale, &mut rng)
        })
        .collect();
    Ok(Dataset {
        height: config.height,
        width: config.width,
        hr_scale: config.hr_scale,
        num_classes: config.num_classes,
        num_modalities: config.num_modalities,
        samples,
    })
}

const MAX_DIRICHLET_RETRIES: usize = 100;

/// Class-wise Dirichlet(γ·1) split of sample indices over `clients` shards.
/// The last class is redrawn until no shard is empty; after the retry budget
/// the largest shards donate samples round-robin to empty ones.
pub fn dirichlet_partition<R: Rng + ?Sized>(labels: &[usize], clients: usize, gamma: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(DataError::Config(format!("dirichlet gamma must be positive, got {gamma}")));
    }
    if clients == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    if clients > labels.len() {
        return Err(DataError::Config(format!(
            "{clients} clients cannot each receive a sample from {} samples",
            labels.len()
        )));
    }
    if clients == 1 {
        return Ok(vec![(0..labels.len()).collect()]);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let nonempty: Vec<usize> = (0..num_classes).filter(|&c| !by_class[c].is_empty()).collect();
    let dirichlet = Dirichlet::new(&vec![gamma; clients]).map_err(|e| DataError::Config(e.to_string()))?;
    let draw = |rng: &mut R| -> Vec<f64> {
        loop {
            let p: Vec<f64> = dirichlet.sample(rng);
            if p.iter().all(|v| v.is_finite()) && p.iter().sum::<f64>() > 0.0 {
                return p;
            }
        }
    };
    let split = |members: &[usize], p: &[f64]| -> Vec<Vec<usize>> {
        let total: f64 = p.iter().sum();
        let n = members.len();
        let mut out = vec![Vec::new(); p.len()];
        let mut start = 0;
        let mut cum = 0.0;
        for (k, pk) in p.iter().enumerate() {
            cum += pk / total;
            let end = if k + 1 == p.len() { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
            out[k].extend_from_slice(&members[start..end]);
            start = end;
        }
        out
    };

    for members in &mut by_class {
        members.shuffle(rng);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (pos, &c) in nonempty.iter().enumerate() {
        let last = pos + 1 == nonempty.len();
        let mut parts = split(&by_class[c], &draw(rng));
        if last {
            let mut tries = 0;
            while tries < MAX_DIRICHLET_RETRIES && shards.iter().zip(&parts).any(|(s, p)| s.is_empty() && p.is_empty()) {
                parts = split(&by_class[c], &draw(rng));
                tries += 1;
            }
        }
        for (s, p) in shards.iter_mut().zip(parts) {
            s.extend(p);
        }
    }
    // deterministic fix-up: largest shard donates its last sample
    for k in 0..clients {
        if shards[k].is_empty() {
            let donor = (0..clients).max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j))).expect("clients > 0");
            let moved = shards[donor].pop().expect("donor has samples");
            shards[k].push(moved);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ModalityMode {
    /// Modality `m` goes to client `m mod K`; requires `M >= K`.
    Disjoint,
    /// Every modality is owned by the clients `k` with `k mod M == m`
    /// (round-robin between owners), then a `fraction` of each client's
    /// samples is handed to the next client.
    Overlapping { fraction: f64 },
}

/// Splits samples by modality. Shards are disjoint and exhaustive.
pub fn modality_partition(modalities: &[usize], clients: usize, mode: ModalityMode) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    let num_modalities = modalities.iter().max().map_or(0, |m| m + 1);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    match mode {
        ModalityMode::Disjoint => {
            if num_modalities < clients {
                return Err(DataError::Config(format!(
                    "disjoint modality split needs at least {clients} modalities, found {num_modalities}"
                )));
            }
            for (i, &m) in modalities.iter().enumerate() {
                shards[m % clients].push(i);
            }
        }
        ModalityMode::Overlapping { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(DataError::Config(format!("overlap fraction must lie in [0, 1], got {fraction}")));
            }
            let owners = |m: usize| -> Vec<usize> {
                if clients >= num_modalities {
                    (0..clients).filter(|k| k % num_modalities == m).collect()
                } else {
                    vec![m % clients]
                }
            };
            let owner_lists: Vec<Vec<usize>> = (0..num_modalities).map(owners).collect();
            let mut seen = vec![0usize; num_modalities];
            // per (client, modality) running position, for the hand-off rule
            let mut held = vec![vec![0usize; num_modalities]; clients];
            for (i, &m) in modalities.iter().enumerate() {
                let list = &owner_lists[m];
                let owner = list[seen[m] % list.len()];
                seen[m] += 1;
                let pos = held[owner][m];
                held[owner][m] += 1;
                let hand_off = ((pos + 1) as f64 * fraction).floor() > (pos as f64 * fraction).floor();
                let target = if hand_off && clients > 1 { (owner + 1) % clients } else { owner };
                shards[target].push(i);
            }
        }
    }
    Ok(shards)
}

const DATASET_MAGIC: &[u8; 8] = b"SPFDDATA";
pub const DATASET_VERSION: u32 = 1;

/// Writes the dataset as: magic, version, geometry and counts (`u32` LE),
/// then per sample class, modality, image pixels (`f64` LE), mask bytes and
/// HR pixels.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    for v in [ds.height, ds.width, 1, ds.hr_scale, ds.num_classes, ds.num_modalities, ds.samples.len()] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for s in &ds.samples {
        w.write_u32::<LittleEndian>(s.class_id as u32)?;
        w.write_u32::<LittleEndian>(s.modality as u32)?;
        for &p in s.image.data() {
            w.write_f64::<LittleEndian>(p)?;
        }
        w.write_all(&s.mask)?;
        for &p in s.hr.data() {
            w.write_f64::<LittleEndian>(p)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Format("bad magic header".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let mut header = [0usize; 7];
    for h in &mut header {
        *h = r.read_u32::<LittleEndian>()? as usize;
    }
    let [height, width, channels, hr_scale, num_classes, num_modalities, count] = header;
    if channels != 1 || height == 0 || width == 0 || hr_scale == 0 {
        return Err(DataError::Format("unsupported geometry".into()));
    }
    let read_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.read_u32::<LittleEndian>()? as usize;
        let modality = r.read_u32::<LittleEndian>()? as usize;
        let pixels = read_f64s(&mut r, height * width)?;
        let mut mask = vec![0u8; height * width];
        r.read_exact(&mut mask)?;
        let hr = read_f64s(&mut r, height * width * hr_scale * hr_scale)?;
        samples.push(Sample {
            image: Image::gray(height, width, pixels).expect("header geometry"),
            class_id,
            modality,
            mask,
            hr: Image::gray(height * hr_scale, width * hr_scale, hr).expect("header geometry"),
        });
    }
    Ok(Dataset {
        height,
        width,
        hr_scale,
        num_classes,
        num_modalities,
        samples,
    })
}
