//! Mask-conditioned fusion: one query token per mask attends over the patch
//! tokens of each fuser layer under a thresholded mask bias.

use super::image::{linear, mlp_backward, mlp_forward, MlpCache};
use super::params::EncoderParams;
use crate::data::TokenMaskSet;
use crate::error::{Error, Result};
use crate::linalg::{
    dot, gemm, gemm_into, l2_normalize_backward, l2_normalize_rows, layer_norm,
    layer_norm_backward, softmax_backward_in_place, softmax_in_place, LayerNormCache, Matrix,
    ViewMut,
};

/// Finite stand-in for −∞ below the mask threshold: out-of-mask positions get
/// bias `−α·C_NEG`, so `α = 0` removes the mask entirely.
pub const C_NEG: f64 = 1e4;

/// Attention bias for one flattened mask row: `α·m` where `m ≥ max/2`,
/// `−α·C_NEG` elsewhere.
pub fn mask_bias(row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::Invalid(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    let max = row.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptyMask { row: 0 });
    }
    let threshold = max / 2.0;
    Ok(row
        .iter()
        .map(|&m| {
            if m >= threshold {
                alpha * m
            } else {
                -alpha * C_NEG
            }
        })
        .collect())
}

pub(crate) fn bias_matrix(masks: &TokenMaskSet, alpha: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(masks.len(), masks.num_tokens());
    for q in 0..masks.len() {
        let b = mask_bias(masks.row(q), alpha).map_err(|e| match e {
            Error::EmptyMask { .. } => Error::EmptyMask { row: q },
            e => e,
        })?;
        out.row_mut(q).copy_from_slice(&b);
    }
    Ok(out)
}

pub(crate) struct MaskLayerCache {
    ln1: LayerNormCache,
    xn1: Matrix,
    q: Matrix,
    probs: Vec<Matrix>,
    mlp: MlpCache,
}

pub(crate) struct FuseCache {
    layers: Vec<MaskLayerCache>,
    bias: Matrix,
    lnf: LayerNormCache,
    norms: Vec<f64>,
    pub out: Matrix,
}

impl FuseCache {
    /// Attention weights `φ`, indexed `[fuser layer][head]`, each `Q × N`.
    pub fn attention(&self) -> Vec<Vec<Matrix>> {
        self.layers.iter().map(|l| l.probs.clone()).collect()
    }
}

/// Run the fuser on mask tokens. `kv[i]` are the full (CLS-first) key and value
/// matrices of fuser layer `K+1+i`; the CLS row is never attended.
pub(crate) fn fuse_forward(
    p: &EncoderParams,
    cls_init: &[f64],
    kv: &[(&Matrix, &Matrix)],
    masks: &TokenMaskSet,
) -> Result<FuseCache> {
    let dims = p.dims;
    let (n, c, heads) = (dims.num_tokens(), dims.width, dims.heads);
    if masks.is_empty() {
        return Err(Error::Invalid("no masks to fuse".into()));
    }
    if masks.num_tokens() != n {
        return Err(Error::Shape(format!(
            "masks cover {} tokens, encoder has {n}",
            masks.num_tokens()
        )));
    }
    let qn = masks.len();
    let d = dims.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let bias = bias_matrix(masks, p.alpha())?;

    let mut e = Matrix::zeros(qn, c);
    for r in 0..qn {
        e.row_mut(r).copy_from_slice(cls_init);
    }
    let mut layers = Vec::with_capacity(kv.len());
    for (i, &(k, v)) in kv.iter().enumerate() {
        let lp = &p.layers[dims.extractor_layers + i];
        let (xn1, ln1) = layer_norm(&e, &lp.ln1_gamma, &lp.ln1_beta);
        let q = linear(&xn1, &lp.wq, &lp.bq);
        let mut attn = Matrix::zeros(qn, c);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut a = bias.clone();
            gemm(
                scale,
                q.col_block(h * d, d),
                k.block(1, n, h * d, d).t(),
                1.0,
                &mut a,
            );
            for r in 0..qn {
                softmax_in_place(a.row_mut(r));
            }
            gemm_into(
                1.0,
                a.view(),
                v.block(1, n, h * d, d),
                0.0,
                ViewMut::col_block(&mut attn, h * d, d),
            );
            probs.push(a);
        }
        let mut e1 = linear(&attn, &lp.wo, &lp.bo);
        e1.add_assign(&e);
        let (e2, mlp) = mlp_forward(lp, &e1);
        e = e2;
        layers.push(MaskLayerCache {
            ln1,
            xn1,
            q,
            probs,
            mlp,
        });
    }
    let (ef, lnf) = layer_norm(&e, &p.lnf_gamma, &p.lnf_beta);
    let projected = ef.matmul(&p.proj);
    let (out, norms) = l2_normalize_rows(&projected);
    Ok(FuseCache {
        layers,
        bias,
        lnf,
        norms,
        out,
    })
}

pub(crate) struct FuseGrads {
    /// Gradient on the CLS token that seeded every mask token.
    pub d_cls: Vec<f64>,
    /// Patch-row key/value gradients per fuser layer, each `N × C`.
    pub dk: Vec<Matrix>,
    pub dv: Vec<Matrix>,
}

/// Backward through [`fuse_forward`]. Accumulates the mask path's share of the
/// q-projection and `log α` gradients into `grads`.
pub(crate) fn fuse_backward(
    p: &EncoderParams,
    cache: &FuseCache,
    kv: &[(&Matrix, &Matrix)],
    d_out: &Matrix,
    grads: &mut EncoderParams,
) -> FuseGrads {
    let dims = p.dims;
    let (n, c) = (dims.num_tokens(), dims.width);
    let d = dims.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let qn = d_out.rows();

    let dproj = l2_normalize_backward(d_out, &cache.out, &cache.norms);
    let def = dproj.matmul_t(&p.proj);
    let mut de = layer_norm_backward(&def, &p.lnf_gamma, &cache.lnf);

    let mut dks = Vec::with_capacity(kv.len());
    let mut dvs = Vec::with_capacity(kv.len());
    let mut d_log_alpha = 0.0;
    for (i, lc) in cache.layers.iter().enumerate().rev() {
        let li = dims.extractor_layers + i;
        let lp = &p.layers[li];
        let (k, v) = kv[i];
        let de1 = mlp_backward(lp, &lc.mlp, &de);
        let dattn = de1.matmul_t(&lp.wo);
        let mut dq = Matrix::zeros(qn, c);
        let mut dk = Matrix::zeros(n, c);
        let mut dv = Matrix::zeros(n, c);
        let mut da = Matrix::zeros(qn, n);
        for (h, probs) in lc.probs.iter().enumerate() {
            gemm(
                1.0,
                dattn.col_block(h * d, d),
                v.block(1, n, h * d, d).t(),
                0.0,
                &mut da,
            );
            gemm_into(
                1.0,
                probs.view().t(),
                dattn.col_block(h * d, d),
                0.0,
                ViewMut::col_block(&mut dv, h * d, d),
            );
            for r in 0..qn {
                softmax_backward_in_place(probs.row(r), da.row_mut(r));
            }
            // ∂bias/∂log α = bias, since the bias is linear in α
            d_log_alpha += dot(da.as_slice(), cache.bias.as_slice());
            gemm_into(
                scale,
                da.view(),
                k.block(1, n, h * d, d),
                0.0,
                ViewMut::col_block(&mut dq, h * d, d),
            );
            gemm_into(
                scale,
                da.view().t(),
                lc.q.col_block(h * d, d),
                0.0,
                ViewMut::col_block(&mut dk, h * d, d),
            );
        }
        let g = &mut grads.layers[li];
        gemm(1.0, lc.xn1.view().t(), dq.view(), 1.0, &mut g.wq);
        dq.col_sums_into(&mut g.bq);
        let dxn = dq.matmul_t(&lp.wq);
        de = layer_norm_backward(&dxn, &lp.ln1_gamma, &lc.ln1);
        de.add_assign(&de1);
        dks.push(dk);
        dvs.push(dv);
    }
    dks.reverse();
    dvs.reverse();
    grads.log_alpha += d_log_alpha;
    let mut d_cls = vec![0.0; c];
    de.col_sums_into(&mut d_cls);
    FuseGrads {
        d_cls,
        dk: dks,
        dv: dvs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_bias() {
        let b = mask_bias(&[1.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(b, vec![1.0, -1e4, 1.0]);
    }

    #[test]
    fn zero_alpha_removes_mask() {
        let b = mask_bias(&[1.0, 0.0, 0.3], 0.0).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn soft_threshold_at_half_max() {
        let b = mask_bias(&[1.0, 0.6, 0.4], 2.0).unwrap();
        assert_eq!(b, vec![2.0, 1.2, -2e4]);
    }

    #[test]
    fn threshold_is_relative_to_row_max() {
        // max 0.4, threshold 0.2: 0.2 is kept, 0.1 suppressed
        let b = mask_bias(&[0.4, 0.2, 0.1], 1.0).unwrap();
        assert_eq!(b, vec![0.4, 0.2, -1e4]);
    }

    #[test]
    fn empty_row_rejected() {
        assert!(matches!(
            mask_bias(&[0.0, 0.0], 1.0),
            Err(Error::EmptyMask { .. })
        ));
        assert!(mask_bias(&[1.0], -1.0).is_err());
    }
}
