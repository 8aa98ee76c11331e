//! The ordinary image-token stream: pre-norm transformer layers with full
//! self-attention over `[CLS; patches]`.

use super::params::{EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::linalg::{
    gemm, gemm_into, layer_norm, layer_norm_backward, quick_gelu, quick_gelu_grad,
    softmax_backward_in_place, softmax_in_place, LayerNormCache, Matrix, ViewMut,
};

pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

/// `[CLS; patches·W_patch] + positional embeddings`.
pub(crate) fn embed_tokens(p: &EncoderParams, patches: &Matrix) -> Result<Matrix> {
    let n = p.dims.num_tokens();
    if patches.shape() != (n, p.dims.patch_dim()) {
        return Err(Error::Shape(format!(
            "expected {}x{} patch matrix, got {}x{}",
            n,
            p.dims.patch_dim(),
            patches.rows(),
            patches.cols()
        )));
    }
    let c = p.dims.width;
    let mut x = Matrix::zeros(n + 1, c);
    x.row_mut(0).copy_from_slice(&p.cls);
    gemm_into(
        1.0,
        patches.view(),
        p.patch_embed.view(),
        0.0,
        ViewMut::block(&mut x, 1, n, 0, c),
    );
    x.add_assign(&p.pos_embed);
    Ok(x)
}

pub(crate) struct MlpCache {
    ln: LayerNormCache,
    pre: Matrix,
}

/// `x + fc2(gelu(fc1(ln2(x))))`
pub(crate) fn mlp_forward(lp: &LayerParams, x: &Matrix) -> (Matrix, MlpCache) {
    let (xn, ln) = layer_norm(x, &lp.ln2_gamma, &lp.ln2_beta);
    let pre = linear(&xn, &lp.w1, &lp.b1);
    let mut act = pre.clone();
    act.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = quick_gelu(*v));
    let mut out = linear(&act, &lp.w2, &lp.b2);
    out.add_assign(x);
    (out, MlpCache { ln, pre })
}

/// Input gradient of [`mlp_forward`], residual included. MLP weights are frozen.
pub(crate) fn mlp_backward(lp: &LayerParams, cache: &MlpCache, dy: &Matrix) -> Matrix {
    let mut dact = dy.matmul_t(&lp.w2);
    for (d, &h) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *d *= quick_gelu_grad(h);
    }
    let dxn = dact.matmul_t(&lp.w1);
    let mut dx = layer_norm_backward(&dxn, &lp.ln2_gamma, &cache.ln);
    dx.add_assign(dy);
    dx
}

pub(crate) struct LayerCache {
    pub ln1: LayerNormCache,
    pub xn1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub mlp: MlpCache,
}

pub(crate) fn layer_forward(lp: &LayerParams, x: &Matrix, heads: usize) -> (Matrix, LayerCache) {
    let (t, c) = x.shape();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (xn1, ln1) = layer_norm(x, &lp.ln1_gamma, &lp.ln1_beta);
    let q = linear(&xn1, &lp.wq, &lp.bq);
    let k = linear(&xn1, &lp.wk, &lp.bk);
    let v = linear(&xn1, &lp.wv, &lp.bv);
    let mut attn = Matrix::zeros(t, c);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = Matrix::zeros(t, t);
        gemm(
            scale,
            q.col_block(h * d, d),
            k.col_block(h * d, d).t(),
            0.0,
            &mut s,
        );
        for i in 0..t {
            softmax_in_place(s.row_mut(i));
        }
        gemm_into(
            1.0,
            s.view(),
            v.col_block(h * d, d),
            0.0,
            ViewMut::col_block(&mut attn, h * d, d),
        );
        probs.push(s);
    }
    let mut x1 = linear(&attn, &lp.wo, &lp.bo);
    x1.add_assign(x);
    let (out, mlp) = mlp_forward(lp, &x1);
    (
        out,
        LayerCache {
            ln1,
            xn1,
            q,
            k,
            v,
            probs,
            mlp,
        },
    )
}

/// Backward through one image layer.
///
/// `inject` adds externally computed gradients on the patch rows of this
/// layer's keys and values (from mask tokens attending to them). Only the q
/// and v projections accumulate parameter gradients.
pub(crate) fn layer_backward(
    lp: &LayerParams,
    cache: &LayerCache,
    dy: &Matrix,
    inject: Option<(&Matrix, &Matrix)>,
    grad: &mut LayerParams,
) -> Matrix {
    let (t, c) = dy.shape();
    let heads = cache.probs.len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let dx1 = mlp_backward(lp, &cache.mlp, dy);
    let dattn = dx1.matmul_t(&lp.wo);
    let mut dq = Matrix::zeros(t, c);
    let mut dk = Matrix::zeros(t, c);
    let mut dv = Matrix::zeros(t, c);
    let mut ds = Matrix::zeros(t, t);
    for (h, p) in cache.probs.iter().enumerate() {
        gemm(
            1.0,
            dattn.col_block(h * d, d),
            cache.v.col_block(h * d, d).t(),
            0.0,
            &mut ds,
        );
        gemm_into(
            1.0,
            p.view().t(),
            dattn.col_block(h * d, d),
            0.0,
            ViewMut::col_block(&mut dv, h * d, d),
        );
        for i in 0..t {
            softmax_backward_in_place(p.row(i), ds.row_mut(i));
        }
        gemm_into(
            scale,
            ds.view(),
            cache.k.col_block(h * d, d),
            0.0,
            ViewMut::col_block(&mut dq, h * d, d),
        );
        gemm_into(
            scale,
            ds.view().t(),
            cache.q.col_block(h * d, d),
            0.0,
            ViewMut::col_block(&mut dk, h * d, d),
        );
    }
    if let Some((ik, iv)) = inject {
        add_patch_rows(&mut dk, ik);
        add_patch_rows(&mut dv, iv);
    }
    accumulate_qv_grads(&cache.xn1, &dq, &dv, grad);

    let mut dxn = dq.matmul_t(&lp.wq);
    gemm(1.0, dk.view(), lp.wk.view().t(), 1.0, &mut dxn);
    gemm(1.0, dv.view(), lp.wv.view().t(), 1.0, &mut dxn);
    let mut dx = layer_norm_backward(&dxn, &lp.ln1_gamma, &cache.ln1);
    dx.add_assign(&dx1);
    dx
}

fn add_patch_rows(full: &mut Matrix, patches: &Matrix) {
    let c = full.cols();
    let dst = &mut full.as_mut_slice()[c..];
    for (a, b) in dst.iter_mut().zip(patches.as_slice()) {
        *a += b;
    }
}

fn accumulate_qv_grads(xn: &Matrix, dq: &Matrix, dv: &Matrix, grad: &mut LayerParams) {
    gemm(1.0, xn.view().t(), dq.view(), 1.0, &mut grad.wq);
    dq.col_sums_into(&mut grad.bq);
    gemm(1.0, xn.view().t(), dv.view(), 1.0, &mut grad.wv);
    dv.col_sums_into(&mut grad.bv);
}

/// Keys and values of a layer's input, without running the rest of the layer.
pub(crate) struct KvCache {
    pub ln1: LayerNormCache,
    pub xn1: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub(crate) fn kv_forward(lp: &LayerParams, x: &Matrix) -> KvCache {
    let (xn1, ln1) = layer_norm(x, &lp.ln1_gamma, &lp.ln1_beta);
    let k = linear(&xn1, &lp.wk, &lp.bk);
    let v = linear(&xn1, &lp.wv, &lp.bv);
    KvCache { ln1, xn1, k, v }
}

pub(crate) fn kv_backward(
    lp: &LayerParams,
    cache: &KvCache,
    dk_patches: &Matrix,
    dv_patches: &Matrix,
    grad: &mut LayerParams,
) -> Matrix {
    let (t, c) = cache.k.shape();
    let mut dk = Matrix::zeros(t, c);
    let mut dv = Matrix::zeros(t, c);
    add_patch_rows(&mut dk, dk_patches);
    add_patch_rows(&mut dv, dv_patches);
    gemm(1.0, cache.xn1.view().t(), dv.view(), 1.0, &mut grad.wv);
    dv.col_sums_into(&mut grad.bv);
    let mut dxn = dk.matmul_t(&lp.wk);
    gemm(1.0, dv.view(), lp.wv.view().t(), 1.0, &mut dxn);
    layer_norm_backward(&dxn, &lp.ln1_gamma, &cache.ln1)
}

/// Cached image stream for training: layers `1..L-1` in full plus the keys and
/// values of layer `L`, which only mask tokens consume.
pub(crate) struct ImagePass {
    /// `inputs[i]` is the input to layer `i + 1`.
    pub inputs: Vec<Matrix>,
    pub caches: Vec<LayerCache>,
    pub top: KvCache,
}

impl ImagePass {
    /// Full key and value matrices (CLS row first) read by fuser layer `l` (1-based).
    pub fn kv(&self, l: usize) -> (&Matrix, &Matrix) {
        if l <= self.caches.len() {
            let c = &self.caches[l - 1];
            (&c.k, &c.v)
        } else {
            (&self.top.k, &self.top.v)
        }
    }
}

pub(crate) fn image_forward_cached(p: &EncoderParams, patches: &Matrix) -> Result<ImagePass> {
    let layers = p.dims.layers;
    let mut x = embed_tokens(p, patches)?;
    let mut inputs = Vec::with_capacity(layers);
    let mut caches = Vec::with_capacity(layers - 1);
    for lp in &p.layers[..layers - 1] {
        let (out, cache) = layer_forward(lp, &x, p.dims.heads);
        inputs.push(std::mem::replace(&mut x, out));
        caches.push(cache);
    }
    let top = kv_forward(&p.layers[layers - 1], &x);
    inputs.push(x);
    Ok(ImagePass {
        inputs,
        caches,
        top,
    })
}

/// Backward through the image stream. `dk`/`dv` hold patch-row gradients for
/// fuser layers `K+1..=L` in order; `d_cls` is the gradient on the CLS row of
/// `F^(K+1)`. Returns the gradient on the embedded tokens.
pub(crate) fn image_backward(
    p: &EncoderParams,
    pass: &ImagePass,
    dk: &[Matrix],
    dv: &[Matrix],
    d_cls: &[f64],
    grads: &mut EncoderParams,
) -> Matrix {
    let layers = p.dims.layers;
    let k = p.dims.extractor_layers;
    let mut dx = kv_backward(
        &p.layers[layers - 1],
        &pass.top,
        &dk[layers - k - 1],
        &dv[layers - k - 1],
        &mut grads.layers[layers - 1],
    );
    for l in (1..layers).rev() {
        // dx is the gradient on the output of layer l
        if l == k {
            for (a, b) in dx.row_mut(0).iter_mut().zip(d_cls) {
                *a += b;
            }
        }
        let inject = (l > k).then(|| (&dk[l - k - 1], &dv[l - k - 1]));
        dx = layer_backward(
            &p.layers[l - 1],
            &pass.caches[l - 1],
            &dx,
            inject,
            &mut grads.layers[l - 1],
        );
    }
    dx
}
