//! Injection of retrieved prototypes into backbone tokens.
//!
//! The default path is single-head cross-attention from backbone tokens
//! (queries) to retrieved prototypes (keys/values), followed by prompt
//! assembly `[Z ‖ r ‖ c]` with client-specific suffix tokens `c`. The
//! alternative modes are the stand-ins used by the ablation harness:
//! FiLM-style modulation from the prototype mean, a token-count preserving
//! projection, and identities that disable each stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Softmax(QKᵀ/√d_h)V over the retrieved prototypes.
    CrossAttention,
    /// Per-channel affine modulation of the tokens from mean(S_g).
    Film,
    /// No fused tokens at all.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// `[Z ‖ r ‖ c]`.
    PrefixSuffix,
    /// `(r + Z)·W_p`, same token count as `r`.
    Projection,
    /// `r` unchanged.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// One prefix token: the mean of the fused rows.
    Pooled,
    /// Every fused row becomes a prefix token.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub prompt: PromptMode,
    pub prefix: PrefixMode,
    /// Attention head width; `None` means equal to the token dimension.
    pub head_dim: Option<usize>,
    pub suffix_count: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::CrossAttention,
            prompt: PromptMode::PrefixSuffix,
            prefix: PrefixMode::Pooled,
            head_dim: None,
            suffix_count: 2,
        }
    }
}

impl FusionConfig {
    /// Configuration under which the fused pipeline collapses to the bare
    /// backbone: no fusion and an identity prompt.
    pub fn identity() -> Self {
        Self {
            mode: FusionMode::None,
            prompt: PromptMode::Identity,
            prefix: PrefixMode::Pooled,
            head_dim: None,
            suffix_count: 0,
        }
    }

    pub fn uses_suffix(&self) -> bool {
        self.prompt == PromptMode::PrefixSuffix && self.suffix_count > 0
    }
}

/// Shared (aggregated) fusion parameters. Which tensors exist depends on
/// the configured modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub dim: usize,
    pub head_dim: usize,
    pub w_q: Option<Tensor>,
    pub w_k: Option<Tensor>,
    pub w_v: Option<Tensor>,
    /// `d_h × d`, present only when `d_h ≠ d`.
    pub w_out: Option<Tensor>,
    pub film_gamma: Option<Tensor>,
    pub film_beta: Option<Tensor>,
    pub w_proj: Option<Tensor>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(config: FusionConfig, dim: usize, rng: &mut R) -> Self {
        let head_dim = config.head_dim.unwrap_or(dim);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut p = Self {
            config: config.clone(),
            dim,
            head_dim,
            w_q: None,
            w_k: None,
            w_v: None,
            w_out: None,
            film_gamma: None,
            film_beta: None,
            w_proj: None,
        };
        match config.mode {
            FusionMode::CrossAttention => {
                p.w_q = Some(Tensor::randn(&[dim, head_dim], scale, rng));
                p.w_k = Some(Tensor::randn(&[dim, head_dim], scale, rng));
                p.w_v = Some(Tensor::randn(&[dim, head_dim], scale, rng));
                if head_dim != dim {
                    p.w_out = Some(Tensor::randn(&[head_dim, dim], 1.0 / (head_dim as f64).sqrt(), rng));
                }
            }
            FusionMode::Film => {
                p.film_gamma = Some(Tensor::randn(&[dim, dim], 0.02, rng));
                p.film_beta = Some(Tensor::randn(&[dim, dim], 0.02, rng));
            }
            FusionMode::None => {}
        }
        if config.prompt == PromptMode::Projection {
            let mut eye = Tensor::zeros(&[dim, dim]);
            for i in 0..dim {
                eye.data_mut()[i * dim + i] = 1.0;
            }
            p.w_proj = Some(eye);
        }
        p
    }

    fn slots(&self) -> [&Option<Tensor>; 7] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_out, &self.film_gamma, &self.film_beta, &self.w_proj]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.slots().into_iter().flatten().collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_out,
            &mut self.film_gamma,
            &mut self.film_beta,
            &mut self.w_proj,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        let mut bind = |t: &Option<Tensor>| t.as_ref().map(|t| tape.param(t));
        FusionVars {
            w_q: bind(&self.w_q),
            w_k: bind(&self.w_k),
            w_v: bind(&self.w_v),
            w_out: bind(&self.w_out),
            film_gamma: bind(&self.film_gamma),
            film_beta: bind(&self.film_beta),
            w_proj: bind(&self.w_proj),
        }
    }

    /// Fused tokens `Z` (`L × d`) for backbone tokens `r` and prototypes
    /// `s_g`, or `None` when fusion is disabled.
    pub fn fuse(&self, tape: &mut Tape, vars: &FusionVars, r: Var, s_g: Var) -> Result<Option<Var>> {
        match self.config.mode {
            FusionMode::CrossAttention => {
                let (z, _) = cross_attention(tape, r, s_g, vars.attention()?)?;
                match vars.w_out {
                    Some(w) => Ok(Some(tape.matmul(z, w)?)),
                    None => Ok(Some(z)),
                }
            }
            FusionMode::Film => {
                let (g, b) = (need(vars.film_gamma, "film_gamma")?, need(vars.film_beta, "film_beta")?);
                Ok(Some(film(tape, r, s_g, g, b)?))
            }
            FusionMode::None => Ok(None),
        }
    }

    /// Builds the token sequence handed to the task head.
    pub fn prompt(&self, tape: &mut Tape, vars: &FusionVars, z: Option<Var>, r: Var, suffix: Option<Var>) -> Result<Prompted> {
        let body_len = tape.shape(r)[0];
        match self.config.prompt {
            PromptMode::PrefixSuffix => {
                let prefix = match (z, self.config.prefix) {
                    (Some(z), PrefixMode::Pooled) => Some(tape.mean_rows(z)?),
                    (Some(z), PrefixMode::Full) => Some(z),
                    (None, _) => None,
                };
                let suffix = if self.config.suffix_count > 0 { suffix } else { None };
                prefix_suffix_concat(tape, prefix, r, suffix)
            }
            PromptMode::Projection => {
                let w = need(vars.w_proj, "w_proj")?;
                let x = match z {
                    Some(z) => tape.add(r, z)?,
                    None => r,
                };
                Ok(Prompted {
                    tokens: tape.matmul(x, w)?,
                    prefix_len: 0,
                    body_len,
                    suffix_len: 0,
                })
            }
            PromptMode::Identity => Ok(Prompted {
                tokens: r,
                prefix_len: 0,
                body_len,
                suffix_len: 0,
            }),
        }
    }
}

fn need(v: Option<Var>, name: &str) -> Result<Var> {
    v.ok_or_else(|| TensorError::Contract(format!("fusion parameter {name} missing for the configured mode")))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FusionVars {
    pub w_q: Option<Var>,
    pub w_k: Option<Var>,
    pub w_v: Option<Var>,
    pub w_out: Option<Var>,
    pub film_gamma: Option<Var>,
    pub film_beta: Option<Var>,
    pub w_proj: Option<Var>,
}

impl FusionVars {
    pub fn ids(&self) -> Vec<Var> {
        [self.w_q, self.w_k, self.w_v, self.w_out, self.film_gamma, self.film_beta, self.w_proj]
            .into_iter()
            .flatten()
            .collect()
    }

    fn attention(&self) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_q: need(self.w_q, "w_q")?,
            w_k: need(self.w_k, "w_k")?,
            w_v: need(self.w_v, "w_v")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// `Z = softmax(Q·Kᵀ/√d_h)·V` with `Q = r·W_Q`, `K = S_g·W_K`, `V = S_g·W_V`.
/// Returns `Z` and the attention matrix.
pub fn cross_attention(tape: &mut Tape, r: Var, s_g: Var, w: AttentionVars) -> Result<(Var, Var)> {
    if tape.shape(s_g).first() == Some(&0) || tape.shape(s_g).len() != 2 {
        return Err(TensorError::Contract("cross_attention needs at least one prototype".into()));
    }
    let q = tape.matmul(r, w.w_q)?;
    let k = tape.matmul(s_g, w.w_k)?;
    let v = tape.matmul(s_g, w.w_v)?;
    let d_h = tape.shape(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / d_h.sqrt());
    let attn = tape.softmax_rows(logits);
    let z = tape.matmul(attn, v)?;
    Ok((z, attn))
}

/// `r ⊙ (1 + m·W_γ) + m·W_β` with `m` the mean prototype.
pub fn film(tape: &mut Tape, r: Var, s_g: Var, gamma: Var, beta: Var) -> Result<Var> {
    let m = tape.mean_rows(s_g)?;
    let g = tape.matmul(m, gamma)?;
    let n = tape.shape(g)[1];
    let ones = tape.constant(&[1, n], vec![1.0; n])?;
    let scale = tape.add(g, ones)?;
    let b = tape.matmul(m, beta)?;
    let modulated = tape.mul_row(r, scale)?;
    tape.add_row(modulated, b)
}

/// A prompted token sequence and the lengths of its three segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prompted {
    pub tokens: Var,
    pub prefix_len: usize,
    pub body_len: usize,
    pub suffix_len: usize,
}

impl Prompted {
    pub fn len(&self) -> usize {
        self.prefix_len + self.body_len + self.suffix_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompt_len(&self) -> usize {
        self.prefix_len + self.suffix_len
    }
}

/// Ordered concatenation `[prefix ‖ r ‖ suffix]`; absent parts are skipped.
pub fn prefix_suffix_concat(tape: &mut Tape, prefix: Option<Var>, r: Var, suffix: Option<Var>) -> Result<Prompted> {
    let mut parts = Vec::with_capacity(3);
    let prefix_len = prefix.map_or(0, |p| tape.shape(p)[0]);
    let suffix_len = suffix.map_or(0, |s| tape.shape(s)[0]);
    parts.extend(prefix);
    parts.push(r);
    parts.extend(suffix);
    let tokens = if parts.len() == 1 { r } else { tape.concat_rows(&parts)? };
    Ok(Prompted {
        tokens,
        prefix_len,
        body_len: tape.shape(r)[0],
        suffix_len,
    })
}

/// Client-specific suffix tokens, zero-mean Gaussian with scale 0.02.
pub fn init_suffix<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Option<Tensor> {
    (count > 0).then(|| Tensor::randn(&[count, dim], 0.02, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_params(d: usize, dh: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..3).map(|_| Tensor::randn(&[d, dh], 0.7, rng)).collect()
    }

    fn run(r: &Tensor, s: &Tensor, w: &[Tensor]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let (rv, sv) = (t.param(r), t.param(s));
        let vars = AttentionVars { w_q: t.param(&w[0]), w_k: t.param(&w[1]), w_v: t.param(&w[2]) };
        let (z, a) = cross_attention(&mut t, rv, sv, vars).unwrap();
        let v = t.matmul(sv, vars.w_v).unwrap();
        (t.value(z).to_vec(), t.value(a).to_vec(), t.value(v).to_vec())
    }

    #[test]
    fn single_prototype_returns_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = attn_params(4, 4, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let s = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let (z, _, v) = run(&r, &s, &w);
        for row in z.chunks(4) {
            assert_eq!(row, &v[..]);
        }
    }

    #[test]
    fn identical_prototypes_give_shared_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = attn_params(4, 4, &mut rng);
        let r = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let row = Tensor::randn(&[1, 4], 1.0, &mut rng).into_data();
        let s = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (z, _, v) = run(&r, &s, &w);
        for zr in z.chunks(4) {
            for (a, b) in zr.iter().zip(&v[..4]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_stepwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, k, d) = (2, 3, 4);
        let w = attn_params(d, d, &mut rng);
        let r = Tensor::randn(&[l, d], 1.0, &mut rng);
        let s = Tensor::randn(&[k, d], 1.0, &mut rng);
        let (z, _, _) = run(&r, &s, &w);
        let proj = |x: &Tensor, m: &Tensor, rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|i| (0..d).map(|j| (0..d).map(|c| x.at(i, c) * m.at(c, j)).sum()).collect())
                .collect()
        };
        let (q, kk, v) = (proj(&r, &w[0], l), proj(&s, &w[1], k), proj(&s, &w[2], k));
        for i in 0..l {
            let logits: Vec<f64> = (0..k)
                .map(|j| q[i].iter().zip(&kk[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..d {
                let expected: f64 = (0..k).map(|j| exps[j] / total * v[j][c]).sum();
                assert!((z[i * d + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_convex_combinations_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = attn_params(6, 3, &mut rng);
        let r = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let s = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let (z, a, v) = run(&r, &s, &w);
        for i in 0..4 {
            let weights = &a[i * 5..(i + 1) * 5];
            assert!(weights.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..3 {
                let recon: f64 = (0..5).map(|j| weights[j] * v[j * 3 + c]).sum();
                assert!((recon - z[i * 3 + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permuting_prototypes_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = attn_params(4, 4, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| Tensor::randn(&[1, 4], 1.0, &mut rng).into_data()).collect();
        let s = Tensor::from_rows(&rows).unwrap();
        let perm = Tensor::from_rows(&[rows[2].clone(), rows[0].clone(), rows[3].clone(), rows[1].clone()]).unwrap();
        let (z1, _, _) = run(&r, &s, &w);
        let (z2, _, _) = run(&r, &perm, &w);
        for (a, b) in z1.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prototypes_is_rejected() {
        let mut t = Tape::new();
        let r = t.param(&Tensor::zeros(&[2, 2]));
        let s = t.param(&Tensor::zeros(&[2]));
        let w = t.param(&Tensor::zeros(&[2, 2]));
        let err = cross_attention(&mut t, r, s, AttentionVars { w_q: w, w_k: w, w_v: w });
        assert!(err.is_err());
    }

    #[test]
    fn concat_identity_and_counting() {
        let mut t = Tape::new();
        let r = t.param(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let p = prefix_suffix_concat(&mut t, None, r, None).unwrap();
        assert_eq!(p.tokens, r);
        assert_eq!(p.len(), 4);

        let z = t.param(&Tensor::from_rows(&[vec![-1.0, -2.0], vec![-3.0, -4.0]]).unwrap());
        let c = t.param(&Tensor::from_rows(&[vec![9.0, 10.0]]).unwrap());
        let p = prefix_suffix_concat(&mut t, Some(z), r, Some(c)).unwrap();
        assert_eq!((p.prefix_len, p.body_len, p.suffix_len), (2, 4, 1));
        assert_eq!(t.shape(p.tokens), &[7, 2]);
        let v = t.value(p.tokens).to_vec();
        assert_eq!(&v[..4], t.value(z));
        assert_eq!(&v[4..12], t.value(r));
        assert_eq!(&v[12..], t.value(c));

        let bad = t.param(&Tensor::zeros(&[1, 3]));
        assert!(prefix_suffix_concat(&mut t, Some(bad), r, None).is_err());
    }

    #[test]
    fn gradients_through_fusion_and_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (mode, prompt, prefix, head_dim) in [
            (FusionMode::CrossAttention, PromptMode::PrefixSuffix, PrefixMode::Pooled, None),
            (FusionMode::CrossAttention, PromptMode::PrefixSuffix, PrefixMode::Full, Some(3)),
            (FusionMode::Film, PromptMode::PrefixSuffix, PrefixMode::Pooled, None),
            (FusionMode::CrossAttention, PromptMode::Projection, PrefixMode::Pooled, None),
        ] {
            let cfg = FusionConfig { mode, prompt, prefix, head_dim, suffix_count: 2 };
            let mut params = FusionParams::init(cfg, 4, &mut rng);
            for t in params.tensors_mut() {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng);
            }
            let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let s = Tensor::randn(&[2, 4], 1.0, &mut rng).with_requires_grad(false);
            let c = init_suffix(2, 4, &mut rng).unwrap();
            let n_out = match prompt {
                PromptMode::PrefixSuffix => match prefix {
                    PrefixMode::Pooled => 6,
                    PrefixMode::Full => 8,
                },
                _ => 3,
            };
            let probe = Tensor::randn(&[n_out, 4], 1.0, &mut rng).with_requires_grad(false);
            let mut inputs = vec![r, s, c, probe];
            let n_fixed = inputs.len();
            inputs.extend(params.tensors().into_iter().cloned());
            let p = params.clone();
            let err = check_gradients(&inputs, |t, v| {
                let mut vars = p.bind(t);
                // rebind the parameter leaves to the checked inputs, in order
                let ids = v[n_fixed..].to_vec();
                let slots = [
                    &mut vars.w_q,
                    &mut vars.w_k,
                    &mut vars.w_v,
                    &mut vars.w_out,
                    &mut vars.film_gamma,
                    &mut vars.film_beta,
                    &mut vars.w_proj,
                ];
                let mut it = ids.into_iter();
                for slot in slots.into_iter().filter(|s| s.is_some()) {
                    *slot = it.next();
                }
                let z = p.fuse(t, &vars, v[0], v[1])?;
                let pr = p.prompt(t, &vars, z, v[0], Some(v[2]))?;
                let q = t.mul(pr.tokens, v[3])?;
                Ok(t.sum(q))
            })
            .unwrap();
            assert!(err < 1e-4, "{mode:?}/{prompt:?}/{prefix:?}: {err:e}");
        }
    }
}
