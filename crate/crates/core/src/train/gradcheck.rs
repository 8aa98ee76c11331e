use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, batch_loss_and_grad, is_trainable, Model};
use crate::error::{Error, Result};
use crate::infer::PreparedSample;
use crate::linalg::Matrix;

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps gradients that are zero up
/// to rounding from dominating the report.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-6)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per checked tensor.
    pub tensors: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Frozen tensors whose analytic gradient was not exactly zero.
    pub leaking_frozen: Vec<String>,
}

/// Compare analytic gradients with central differences on up to `coords`
/// random coordinates of each tensor in `names`.
///
/// A central difference carries rounding noise of about `ulp(L) / eps`, so the
/// zero-gradient floor is `1e-6 · max(1, |L|)`.
pub fn grad_check(
    model: &Model,
    batch: &[&PreparedSample],
    text: &Matrix,
    names: &[String],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (loss, grads) = batch_loss_and_grad(model, batch, text)?;
    let floor = 1e-6 * loss.abs().max(1.0);
    let leaking_frozen = grads
        .params()
        .iter()
        .filter(|p| !is_trainable(&p.name) && p.data.iter().any(|&v| v != 0.0))
        .map(|p| p.name.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(names.len());
    let mut max_rel_err = 0.0f64;
    for name in names {
        let g = grads
            .params()
            .into_iter()
            .find(|p| &p.name == name)
            .map(|p| p.data.to_vec())
            .ok_or_else(|| Error::Invalid(format!("no parameter named '{name}'")))?;
        let picks = rand::seq::index::sample(&mut rng, g.len(), coords.min(g.len())).into_vec();
        let mut worst = 0.0f64;
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut()
                    .into_iter()
                    .find(|p| &p.name == name)
                    .expect("name checked above")
                    .data[i] += delta;
                batch_loss(&m, batch, text)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            worst = worst.max(relative_error_with_floor(g[i], numeric, floor));
        }
        max_rel_err = max_rel_err.max(worst);
        tensors.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        leaking_frozen,
    })
}
