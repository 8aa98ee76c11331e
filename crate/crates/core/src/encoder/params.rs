use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{ParamMut, ParamRef};

/// Initial value of `log α`; α starts at e⁻⁵.
pub const LOG_ALPHA_INIT: f64 = -5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Total transformer layers `L`.
    pub layers: usize,
    /// Extractor depth `K`; layers `K+1..=L` form the fuser.
    pub extractor_layers: usize,
    /// Residual width `C`.
    pub width: usize,
    /// Joint embedding dimension `D`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Side of the square token grid, so `N = grid²`.
    pub grid: usize,
    /// Side of a square patch in pixels.
    pub patch: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            layers: 4,
            extractor_layers: 2,
            width: 64,
            embed_dim: 32,
            heads: 4,
            grid: 16,
            patch: 4,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.extractor_layers == 0 || self.extractor_layers >= self.layers {
            return Err(Error::Invalid(format!(
                "need 1 <= K < L, got K={} L={}",
                self.extractor_layers, self.layers
            )));
        }
        if self.embed_dim == 0 || self.grid == 0 || self.patch == 0 {
            return Err(Error::Invalid("zero-sized dimension".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch
    }

    pub fn fuser_layers(&self) -> usize {
        self.layers - self.extractor_layers
    }

    /// Number of scalar parameters, counted from the architecture.
    pub fn parameter_count(&self) -> usize {
        let c = self.width;
        let per_layer = 2 * c            // ln1
            + 4 * (c * c + c)            // q, k, v, out
            + 2 * c                      // ln2
            + (c * 4 * c + 4 * c)        // fc1
            + (4 * c * c + c); // fc2
        self.patch_dim() * c
            + (self.num_tokens() + 1) * c
            + c
            + self.layers * per_layer
            + 2 * c
            + c * self.embed_dim
            + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Vision transformer weights. Linear maps are stored `in × out` and applied
/// as `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub patch_embed: Matrix,
    pub pos_embed: Matrix,
    pub cls: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Vec<f64>,
    pub lnf_beta: Vec<f64>,
    pub proj: Matrix,
    pub log_alpha: f64,
}

struct TruncNormal {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
    bound: f64,
}

impl TruncNormal {
    fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, std).unwrap(),
            bound: 2.0 * std,
        }
    }

    fn sample(&mut self) -> f64 {
        loop {
            let v = self.dist.sample(&mut self.rng);
            if v.abs() <= self.bound {
                return v;
            }
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| self.sample()).collect(),
        )
    }

    fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample()).collect()
    }
}

impl EncoderParams {
    /// Truncated-normal (std 0.02, cut at 2σ) weights, zero biases, identity norms.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let c = dims.width;
        let mut tn = TruncNormal::new(seed, 0.02);
        let patch_embed = tn.matrix(dims.patch_dim(), c);
        let pos_embed = tn.matrix(dims.num_tokens() + 1, c);
        let cls = tn.vec(c);
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                ln1_gamma: vec![1.0; c],
                ln1_beta: vec![0.0; c],
                wq: tn.matrix(c, c),
                bq: vec![0.0; c],
                wk: tn.matrix(c, c),
                bk: vec![0.0; c],
                wv: tn.matrix(c, c),
                bv: vec![0.0; c],
                wo: tn.matrix(c, c),
                bo: vec![0.0; c],
                ln2_gamma: vec![1.0; c],
                ln2_beta: vec![0.0; c],
                w1: tn.matrix(c, 4 * c),
                b1: vec![0.0; 4 * c],
                w2: tn.matrix(4 * c, c),
                b2: vec![0.0; c],
            })
            .collect();
        let proj = tn.matrix(c, dims.embed_dim);
        Ok(Self {
            dims,
            patch_embed,
            pos_embed,
            cls,
            layers,
            lnf_gamma: vec![1.0; c],
            lnf_beta: vec![0.0; c],
            proj,
            log_alpha: LOG_ALPHA_INIT,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Same shapes, every value zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.fill(0.0);
        }
        z
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef::matrix("patch_embed", &self.patch_embed),
            ParamRef::matrix("pos_embed", &self.pos_embed),
            ParamRef::vector("cls", &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                ParamRef::vector(n("ln1.gamma"), &l.ln1_gamma),
                ParamRef::vector(n("ln1.beta"), &l.ln1_beta),
                ParamRef::matrix(n("attn.q.weight"), &l.wq),
                ParamRef::vector(n("attn.q.bias"), &l.bq),
                ParamRef::matrix(n("attn.k.weight"), &l.wk),
                ParamRef::vector(n("attn.k.bias"), &l.bk),
                ParamRef::matrix(n("attn.v.weight"), &l.wv),
                ParamRef::vector(n("attn.v.bias"), &l.bv),
                ParamRef::matrix(n("attn.out.weight"), &l.wo),
                ParamRef::vector(n("attn.out.bias"), &l.bo),
                ParamRef::vector(n("ln2.gamma"), &l.ln2_gamma),
                ParamRef::vector(n("ln2.beta"), &l.ln2_beta),
                ParamRef::matrix(n("mlp.fc1.weight"), &l.w1),
                ParamRef::vector(n("mlp.fc1.bias"), &l.b1),
                ParamRef::matrix(n("mlp.fc2.weight"), &l.w2),
                ParamRef::vector(n("mlp.fc2.bias"), &l.b2),
            ]);
        }
        out.extend([
            ParamRef::vector("ln_final.gamma", &self.lnf_gamma),
            ParamRef::vector("ln_final.beta", &self.lnf_beta),
            ParamRef::matrix("proj", &self.proj),
            ParamRef::scalar("log_alpha", &self.log_alpha),
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = vec![
            ParamMut::matrix("patch_embed", &mut self.patch_embed),
            ParamMut::matrix("pos_embed", &mut self.pos_embed),
            ParamMut::vector("cls", &mut self.cls),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                ParamMut::vector(n("ln1.gamma"), &mut l.ln1_gamma),
                ParamMut::vector(n("ln1.beta"), &mut l.ln1_beta),
                ParamMut::matrix(n("attn.q.weight"), &mut l.wq),
                ParamMut::vector(n("attn.q.bias"), &mut l.bq),
                ParamMut::matrix(n("attn.k.weight"), &mut l.wk),
                ParamMut::vector(n("attn.k.bias"), &mut l.bk),
                ParamMut::matrix(n("attn.v.weight"), &mut l.wv),
                ParamMut::vector(n("attn.v.bias"), &mut l.bv),
                ParamMut::matrix(n("attn.out.weight"), &mut l.wo),
                ParamMut::vector(n("attn.out.bias"), &mut l.bo),
                ParamMut::vector(n("ln2.gamma"), &mut l.ln2_gamma),
                ParamMut::vector(n("ln2.beta"), &mut l.ln2_beta),
                ParamMut::matrix(n("mlp.fc1.weight"), &mut l.w1),
                ParamMut::vector(n("mlp.fc1.bias"), &mut l.b1),
                ParamMut::matrix(n("mlp.fc2.weight"), &mut l.w2),
                ParamMut::vector(n("mlp.fc2.bias"), &mut l.b2),
            ]);
        }
        out.extend([
            ParamMut::vector("ln_final.gamma", &mut self.lnf_gamma),
            ParamMut::vector("ln_final.beta", &mut self.lnf_beta),
            ParamMut::matrix("proj", &mut self.proj),
            ParamMut::scalar("log_alpha", &mut self.log_alpha),
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_formula() {
        let dims = EncoderDims {
            layers: 4,
            extractor_layers: 2,
            width: 64,
            embed_dim: 32,
            heads: 4,
            grid: 16,
            patch: 4,
        };
        let p = EncoderParams::init(dims, 0).unwrap();
        let counted: usize = p.params().iter().map(|t| t.data.len()).sum();
        // hand expansion for these dims:
        // patch 48·64 + pos 257·64 + cls 64 + 4·(128 + 4·4160 + 128 + 16640 + 16448)
        // + final norm 128 + proj 2048 + alpha 1
        let by_hand = 3072 + 16448 + 64 + 4 * (128 + 16640 + 128 + 16640 + 16448) + 128 + 2048 + 1;
        assert_eq!(counted, by_hand);
        assert_eq!(dims.parameter_count(), by_hand);
    }

    #[test]
    fn alpha_starts_at_e_minus_5() {
        let p = EncoderParams::init(EncoderDims::default(), 1).unwrap();
        assert!((p.alpha() - 6.7379e-3).abs() < 1e-7);
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(EncoderDims::default(), 7).unwrap();
        let b = EncoderParams::init(EncoderDims::default(), 7).unwrap();
        let c = EncoderParams::init(EncoderDims::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn heads_must_divide_width() {
        let dims = EncoderDims {
            heads: 5,
            ..EncoderDims::default()
        };
        assert!(EncoderParams::init(dims, 0).is_err());
    }

    #[test]
    fn init_distribution() {
        let p = EncoderParams::init(EncoderDims::default(), 2).unwrap();
        let w = p.layers[0].wq.as_slice();
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        // a normal truncated at 2σ has std ≈ 0.88σ
        assert!((std - 0.0176).abs() < 0.001, "{std}");
        assert!(p.layers[0].bq.iter().all(|&b| b == 0.0));
        assert!(p.lnf_gamma.iter().all(|&g| g == 1.0));
    }
}
