//! Two-mask toy showing how an unconstrained `Θ` can fix the ordering of the
//! transformed similarities `r` while breaking the ordering of the original
//! similarities `s`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct DemoConfig {
    /// Unit text embedding.
    pub t: Vec<f64>,
    pub m: [Vec<f64>; 2],
    pub theta: Matrix,
    pub target: [f64; 2],
    pub lr: f64,
    pub steps: usize,
}

impl DemoConfig {
    /// `D = 2`, `Θ = 2·rot(120°)`, `t = e₁`. Initially `s` ranks the masks as
    /// the target does and `r` does not; one L1 step on `m` swaps both.
    pub fn canonical() -> Self {
        let (sin, cos) = (120f64).to_radians().sin_cos();
        Self {
            t: vec![1.0, 0.0],
            m: [vec![0.6, 0.8], vec![0.5, -0.2]],
            theta: Matrix::from_rows(&[vec![2.0 * cos, -2.0 * sin], vec![2.0 * sin, 2.0 * cos]]),
            target: [1.0, -1.0],
            lr: 0.25,
            steps: 1,
        }
    }

    /// The canonical config with `Θ = I`.
    pub fn with_identity(mut self) -> Self {
        self.theta = Matrix::identity(self.t.len());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoRow {
    pub step: usize,
    pub s1: f64,
    pub s2: f64,
    pub r1: f64,
    pub r2: f64,
    pub s_rank_correct: bool,
    pub r_rank_correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoReport {
    pub rows: Vec<DemoRow>,
}

impl DemoReport {
    pub fn first(&self) -> &DemoRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &DemoRow {
        self.rows.last().expect("at least one row")
    }

    /// Rank correlation of `s` (resp. `r`) with the target, per row.
    pub fn s_agreement(&self, target: [f64; 2]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| rank_correlation([r.s1, r.s2], target))
            .collect()
    }

    pub fn r_agreement(&self, target: [f64; 2]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| rank_correlation([r.r1, r.r2], target))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,s1,s2,r1,r2,s_rank_correct,r_rank_correct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.s1, r.s2, r.r1, r.r2, r.s_rank_correct, r.r_rank_correct
            ));
        }
        out
    }
}

/// Spearman correlation of two pairs: `1` same order, `-1` reversed, `0` on a tie.
pub fn rank_correlation(x: [f64; 2], y: [f64; 2]) -> f64 {
    let sx = (x[0] - x[1])
        .partial_cmp(&0.0)
        .map_or(0.0, |o| o as i8 as f64);
    let sy = (y[0] - y[1])
        .partial_cmp(&0.0)
        .map_or(0.0, |o| o as i8 as f64);
    sx * sy
}

fn row(step: usize, cfg: &DemoConfig, m: &[Vec<f64>; 2], theta_t: &[f64]) -> DemoRow {
    let s = [dot(&m[0], &cfg.t), dot(&m[1], &cfg.t)];
    // r = (Θm)ᵀt = mᵀ(Θᵀt)
    let r = [dot(&m[0], theta_t), dot(&m[1], theta_t)];
    DemoRow {
        step,
        s1: s[0],
        s2: s[1],
        r1: r[0],
        r2: r[1],
        s_rank_correct: rank_correlation(s, cfg.target) > 0.0,
        r_rank_correct: rank_correlation(r, cfg.target) > 0.0,
    }
}

/// Gradient descent on `m` alone under `L = |r1 − ŝ1| + |r2 − ŝ2|`, recording
/// `s` and `r` before the first step and after each step.
pub fn demo_inconsistency(cfg: &DemoConfig) -> Result<DemoReport> {
    let d = cfg.t.len();
    if d == 0 || cfg.m.iter().any(|m| m.len() != d) || cfg.theta.shape() != (d, d) {
        return Err(Error::Shape(
            "t, m1, m2 and theta must share one dimension".into(),
        ));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::Invalid(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    let theta_t: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|i| cfg.theta[(i, j)] * cfg.t[i]).sum())
        .collect();
    if theta_t.iter().all(|&v| v == 0.0) {
        return Err(Error::Invalid(
            "theta maps t to zero, so the loss has no gradient in m".into(),
        ));
    }
    let mut m = cfg.m.clone();
    let mut rows = vec![row(0, cfg, &m, &theta_t)];
    for step in 1..=cfg.steps {
        for (i, mi) in m.iter_mut().enumerate() {
            let r = dot(mi, &theta_t);
            let g = (r - cfg.target[i]).signum() * ((r - cfg.target[i]) != 0.0) as u8 as f64;
            for (v, &a) in mi.iter_mut().zip(&theta_t) {
                *v -= cfg.lr * g * a;
            }
        }
        rows.push(row(step, cfg, &m, &theta_t));
    }
    Ok(DemoReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_witness() {
        let cfg = DemoConfig::canonical();
        let rep = demo_inconsistency(&cfg).unwrap();
        let (a, b) = (rep.first(), rep.last());
        assert!(a.s_rank_correct && !a.r_rank_correct);
        assert!(b.r_rank_correct && !b.s_rank_correct);
        // hand-computed: Θᵀt = (−1, −√3); m1 ← m1 − 0.25·(1, √3), m2 ← m2 + 0.25·(−1, −√3)
        let r3 = 3f64.sqrt();
        assert!((a.r1 - (-0.6 - 0.8 * r3)).abs() < 1e-12);
        assert!((b.s1 - 0.35).abs() < 1e-12 && (b.s2 - 0.75).abs() < 1e-12);
        let s = rep.s_agreement(cfg.target);
        let r = rep.r_agreement(cfg.target);
        assert!(r[1] > r[0] && s[1] < s[0]);
    }

    #[test]
    fn identity_theta_keeps_s_equal_r() {
        let rep = demo_inconsistency(&DemoConfig::canonical().with_identity()).unwrap();
        for r in &rep.rows {
            assert_eq!((r.s1, r.s2), (r.r1, r.r2));
        }
        // both move toward the target
        assert!(rep.last().s1 > rep.first().s1 && rep.last().s2 < rep.first().s2);
    }

    #[test]
    fn zero_lr_leaves_values() {
        let mut cfg = DemoConfig::canonical();
        cfg.lr = 0.0;
        let rep = demo_inconsistency(&cfg).unwrap();
        let (a, b) = (rep.first(), rep.last());
        assert_eq!((a.s1, a.s2, a.r1, a.r2), (b.s1, b.s2, b.r1, b.r2));
    }

    #[test]
    fn degenerate_theta_rejected() {
        let mut cfg = DemoConfig::canonical();
        cfg.theta = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(demo_inconsistency(&cfg).is_err());
    }

    #[test]
    fn csv_header() {
        let csv = demo_inconsistency(&DemoConfig::canonical())
            .unwrap()
            .to_csv();
        assert!(csv.starts_with("step,s1,s2,r1,r2,s_rank_correct,r_rank_correct\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
