//! Parameterized similarity heads that refine the mask-text cosine matrix, and
//! the cross-entropy objective over the refined scores.
//!
//! `EmbedLeft`/`EmbedRight` transform one side's embeddings with a `D × D`
//! matrix before the inner product. `SimAffine` instead lifts every scalar
//! similarity into a `P`-dimensional space and back, which composes to an
//! affine map of the raw similarity.

mod demo;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize_backward, l2_normalize_rows, softmax_in_place, Matrix};
use crate::params::{ParamMut, ParamRef};

pub use demo::{demo_inconsistency, rank_correlation, DemoConfig, DemoReport, DemoRow};

/// Width of the lifted similarity dimension in [`PsmKind::SimAffine`].
pub const DEFAULT_PSM_DIM: usize = 768;

/// `ln 100`, the initial logit scale.
pub const LOG_LOGIT_SCALE_INIT: f64 = 4.605_170_185_988_092;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsmKind {
    EmbedLeft,
    EmbedRight,
    SimAffine,
}

impl PsmKind {
    pub const ALL: [PsmKind; 3] = [PsmKind::EmbedLeft, PsmKind::EmbedRight, PsmKind::SimAffine];

    pub fn as_str(self) -> &'static str {
        match self {
            PsmKind::EmbedLeft => "embed_left",
            PsmKind::EmbedRight => "embed_right",
            PsmKind::SimAffine => "sim_affine",
        }
    }
}

impl fmt::Display for PsmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PsmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PsmKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown PSM variant '{s}' (expected embed_left, embed_right or sim_affine)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PsmHead {
    /// `R = ⟨normalize(Θ·m), t⟩`
    EmbedLeft { theta: Matrix },
    /// `R = ⟨m, normalize(Θ·t)⟩`
    EmbedRight { theta: Matrix },
    /// `R = w2ᵀ(w1·s + b1) + b2` for every scalar `s` of `S`.
    SimAffine {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsmParams {
    pub head: PsmHead,
    pub log_logit_scale: f64,
}

impl PsmParams {
    /// Identity-initialized head: `Θ = I`, or `w1 = w2 = 1/√P` with zero biases,
    /// so that `R = S` before training.
    pub fn init(kind: PsmKind, embed_dim: usize, psm_dim: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Invalid(
                "embedding dimension must be positive".into(),
            ));
        }
        if psm_dim == 0 {
            return Err(Error::Invalid("PSM dimension must be at least 1".into()));
        }
        let head = match kind {
            PsmKind::EmbedLeft => PsmHead::EmbedLeft {
                theta: Matrix::identity(embed_dim),
            },
            PsmKind::EmbedRight => PsmHead::EmbedRight {
                theta: Matrix::identity(embed_dim),
            },
            PsmKind::SimAffine => {
                let w = 1.0 / (psm_dim as f64).sqrt();
                PsmHead::SimAffine {
                    w1: vec![w; psm_dim],
                    b1: vec![0.0; psm_dim],
                    w2: vec![w; psm_dim],
                    b2: 0.0,
                }
            }
        };
        Ok(Self {
            head,
            log_logit_scale: LOG_LOGIT_SCALE_INIT,
        })
    }

    pub fn kind(&self) -> PsmKind {
        match self.head {
            PsmHead::EmbedLeft { .. } => PsmKind::EmbedLeft,
            PsmHead::EmbedRight { .. } => PsmKind::EmbedRight,
            PsmHead::SimAffine { .. } => PsmKind::SimAffine,
        }
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_logit_scale.exp()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.fill(0.0);
        }
        z
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = match &self.head {
            PsmHead::EmbedLeft { theta } | PsmHead::EmbedRight { theta } => {
                vec![ParamRef::matrix("theta", theta)]
            }
            PsmHead::SimAffine { w1, b1, w2, b2 } => vec![
                ParamRef::vector("w1", w1),
                ParamRef::vector("b1", b1),
                ParamRef::vector("w2", w2),
                ParamRef::scalar("b2", b2),
            ],
        };
        out.push(ParamRef::scalar("log_logit_scale", &self.log_logit_scale));
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = match &mut self.head {
            PsmHead::EmbedLeft { theta } | PsmHead::EmbedRight { theta } => {
                vec![ParamMut::matrix("theta", theta)]
            }
            PsmHead::SimAffine { w1, b1, w2, b2 } => vec![
                ParamMut::vector("w1", w1),
                ParamMut::vector("b1", b1),
                ParamMut::vector("w2", w2),
                ParamMut::scalar("b2", b2),
            ],
        };
        out.push(ParamMut::scalar(
            "log_logit_scale",
            &mut self.log_logit_scale,
        ));
        out
    }

    /// Slope and offset of the affine map a `SimAffine` head applies to `S`.
    pub fn effective_affine(&self) -> Result<(f64, f64)> {
        match &self.head {
            PsmHead::SimAffine { w1, b1, w2, b2 } => Ok((dot(w2, w1), dot(w2, b1) + b2)),
            _ => Err(Error::Invalid(format!(
                "effective_affine needs a sim_affine head, got {}",
                self.kind()
            ))),
        }
    }
}

fn check_pair(e_m: &Matrix, e_t: &Matrix) -> Result<()> {
    if e_m.cols() != e_t.cols() {
        return Err(Error::Shape(format!(
            "mask embeddings have dimension {}, text embeddings {}",
            e_m.cols(),
            e_t.cols()
        )));
    }
    Ok(())
}

/// `S = E_m E_tᵀ`; cosine similarity for unit rows.
pub fn raw_similarity(e_m: &Matrix, e_t: &Matrix) -> Result<Matrix> {
    check_pair(e_m, e_t)?;
    Ok(e_m.matmul_t(e_t))
}

/// Intermediate values kept by [`psm_forward`] for [`psm_backward`].
pub struct PsmTrace {
    s: Matrix,
    normalized: Option<(Matrix, Vec<f64>)>,
    pub refined: Matrix,
}

fn check_theta(theta: &Matrix, d: usize) -> Result<()> {
    if theta.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "theta is {}x{}, embeddings have dimension {d}",
            theta.rows(),
            theta.cols()
        )));
    }
    Ok(())
}

pub fn psm_forward(params: &PsmParams, e_m: &Matrix, e_t: &Matrix) -> Result<PsmTrace> {
    let s = raw_similarity(e_m, e_t)?;
    let d = e_m.cols();
    let (refined, normalized) = match &params.head {
        PsmHead::EmbedLeft { theta } => {
            check_theta(theta, d)?;
            let (u, norms) = l2_normalize_rows(&e_m.matmul_t(theta));
            (u.matmul_t(e_t), Some((u, norms)))
        }
        PsmHead::EmbedRight { theta } => {
            check_theta(theta, d)?;
            let (v, norms) = l2_normalize_rows(&e_t.matmul_t(theta));
            (e_m.matmul_t(&v), Some((v, norms)))
        }
        PsmHead::SimAffine { w1, b1, w2, b2 } => {
            if w1.is_empty() || w1.len() != b1.len() || w1.len() != w2.len() {
                return Err(Error::Shape(
                    "sim_affine vectors must share one nonzero length".into(),
                ));
            }
            let mut r = s.clone();
            for v in r.as_mut_slice() {
                let x = *v;
                *v = w1
                    .iter()
                    .zip(b1)
                    .zip(w2)
                    .map(|((a, b), c)| c * (a * x + b))
                    .sum::<f64>()
                    + b2;
            }
            (r, None)
        }
    };
    Ok(PsmTrace {
        s,
        normalized,
        refined,
    })
}

/// Refined similarity matrix `R`.
pub fn apply_psm(params: &PsmParams, e_m: &Matrix, e_t: &Matrix) -> Result<Matrix> {
    Ok(psm_forward(params, e_m, e_t)?.refined)
}

/// Backward through the head. Accumulates parameter gradients into `grads`
/// (same variant as `params`) and returns the gradient on `E_m`.
pub fn psm_backward(
    params: &PsmParams,
    trace: &PsmTrace,
    e_m: &Matrix,
    e_t: &Matrix,
    d_r: &Matrix,
    grads: &mut PsmParams,
) -> Matrix {
    match (&params.head, &mut grads.head) {
        (PsmHead::EmbedLeft { theta }, PsmHead::EmbedLeft { theta: g }) => {
            let (u, norms) = trace.normalized.as_ref().expect("embed trace");
            let du = l2_normalize_backward(&d_r.matmul(e_t), u, norms);
            g.add_assign(&du.t_matmul(e_m));
            du.matmul(theta)
        }
        (PsmHead::EmbedRight { theta: _ }, PsmHead::EmbedRight { theta: g }) => {
            let (v, norms) = trace.normalized.as_ref().expect("embed trace");
            let dv = l2_normalize_backward(&d_r.t_matmul(e_m), v, norms);
            g.add_assign(&dv.t_matmul(e_t));
            d_r.matmul(v)
        }
        (
            PsmHead::SimAffine { w1, b1, w2, .. },
            PsmHead::SimAffine {
                w1: g1,
                b1: gb1,
                w2: g2,
                b2: gb2,
            },
        ) => {
            let sum_d = d_r.as_slice().iter().sum::<f64>();
            let sum_ds = dot(d_r.as_slice(), trace.s.as_slice());
            for p in 0..w1.len() {
                g1[p] += w2[p] * sum_ds;
                gb1[p] += w2[p] * sum_d;
                g2[p] += w1[p] * sum_ds + b1[p] * sum_d;
            }
            *gb2 += sum_d;
            let mut ds = d_r.clone();
            let a = dot(w2, w1);
            ds.as_mut_slice().iter_mut().for_each(|v| *v *= a);
            ds.matmul(e_t)
        }
        _ => panic!("gradient buffer variant differs from parameters"),
    }
}

pub struct LossOutput {
    pub loss: f64,
    /// Gradient on `R`.
    pub d_refined: Matrix,
    pub d_log_logit_scale: f64,
}

/// Row-wise softmax of `exp(log_logit_scale)·R`.
pub fn class_probabilities(refined: &Matrix, log_logit_scale: f64) -> Matrix {
    let scale = log_logit_scale.exp();
    let mut p = refined.clone();
    p.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    for q in 0..p.rows() {
        softmax_in_place(p.row_mut(q));
    }
    p
}

/// Mean cross-entropy of `softmax(exp(log_logit_scale)·R)` against `labels`.
pub fn classification_loss(
    refined: &Matrix,
    labels: &[usize],
    log_logit_scale: f64,
) -> Result<LossOutput> {
    let (q, k) = refined.shape();
    if q == 0 {
        return Err(Error::Invalid(
            "classification loss over an empty mask set".into(),
        ));
    }
    if labels.len() != q {
        return Err(Error::Shape(format!(
            "{q} similarity rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {k} categories"
        )));
    }
    let scale = log_logit_scale.exp();
    let probs = class_probabilities(refined, log_logit_scale);
    let mut loss = 0.0;
    let mut d_refined = probs;
    let mut d_log_logit_scale = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let z = refined.row(r);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax * scale
            + z.iter()
                .map(|&v| ((v - zmax) * scale).exp())
                .sum::<f64>()
                .ln();
        loss += lse - scale * z[label];
        let g = d_refined.row_mut(r);
        g[label] -= 1.0;
        // dL/dz = (p - y)/Q with z = scale·R
        for v in g.iter_mut() {
            *v /= q as f64;
        }
        d_log_logit_scale += scale * dot(g, z);
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(LossOutput {
        loss: loss / q as f64,
        d_refined,
        d_log_logit_scale,
    })
}

/// Spearman rank correlation with average ranks for ties; `NaN` if either side
/// is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va * vb).sqrt()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
