//! A small pre-norm vision transformer split into an extractor (layers `1..=K`)
//! and a fuser (layers `K+1..=L`). The fuser additionally runs one token per
//! mask, seeded from the CLS token of `F^(K+1)`, whose attention over patch
//! tokens is restricted by a thresholded mask bias. Mask tokens reuse every
//! layer parameter of the image path and never write back into it.

mod fusion;
mod image;
mod params;

use crate::data::TokenMaskSet;
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, layer_norm, Matrix};

pub use fusion::{mask_bias, C_NEG};
pub use params::{EncoderDims, EncoderParams, LayerParams, LOG_ALPHA_INIT};

use fusion::{fuse_backward, fuse_forward, FuseCache};
use image::{image_backward, image_forward_cached, ImagePass};

/// Image-token states entering fuser layers `K+1..=L`, plus the output of layer `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStates {
    /// 1-based index of the layer that consumes `states[0]`, i.e. `K + 1`.
    pub first_layer: usize,
    /// `(N+1) × C` each, CLS first.
    pub states: Vec<Matrix>,
}

impl TokenStates {
    /// Input to layer `l` (1-based); `l = L + 1` is the final output.
    pub fn input_to(&self, l: usize) -> &Matrix {
        &self.states[l - self.first_layer]
    }

    pub fn output(&self) -> &Matrix {
        self.states.last().expect("at least two states")
    }
}

/// Row-normalized `Q × D` mask embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEmbeddings(pub Matrix);

impl MaskEmbeddings {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Full forward through all `L` layers, recording `F^(K+1) ..= F^(L+1)`.
pub fn extract(params: &EncoderParams, patches: &Matrix) -> Result<TokenStates> {
    let dims = params.dims;
    let mut x = image::embed_tokens(params, patches)?;
    let mut states = Vec::with_capacity(dims.fuser_layers() + 1);
    for (i, lp) in params.layers.iter().enumerate() {
        if i >= dims.extractor_layers {
            states.push(x.clone());
        }
        x = image::layer_forward(lp, &x, dims.heads).0;
    }
    states.push(x);
    Ok(TokenStates {
        first_layer: dims.extractor_layers + 1,
        states,
    })
}

fn check_states(params: &EncoderParams, states: &TokenStates) -> Result<()> {
    let dims = params.dims;
    if states.first_layer != dims.extractor_layers + 1
        || states.states.len() != dims.fuser_layers() + 1
    {
        return Err(Error::Shape(
            "token states do not match encoder depth".into(),
        ));
    }
    Ok(())
}

/// Mask embeddings plus the fuser attention weights `φ[layer][head]` (`Q × N`).
pub struct FuseOutput {
    pub embeddings: MaskEmbeddings,
    pub attention: Vec<Vec<Matrix>>,
}

pub fn fuse_detailed(
    params: &EncoderParams,
    states: &TokenStates,
    masks: &TokenMaskSet,
) -> Result<FuseOutput> {
    check_states(params, states)?;
    let dims = params.dims;
    let caches: Vec<_> = (dims.extractor_layers..dims.layers)
        .map(|li| image::kv_forward(&params.layers[li], states.input_to(li + 1)))
        .collect();
    let kv: Vec<_> = caches.iter().map(|c| (&c.k, &c.v)).collect();
    let cls = states.states[0].row(0);
    let cache = fuse_forward(params, cls, &kv, masks)?;
    Ok(FuseOutput {
        attention: cache.attention(),
        embeddings: MaskEmbeddings(cache.out),
    })
}

pub fn fuse(
    params: &EncoderParams,
    states: &TokenStates,
    masks: &TokenMaskSet,
) -> Result<MaskEmbeddings> {
    Ok(fuse_detailed(params, states, masks)?.embeddings)
}

/// Masked average pooling over the final-layer patch tokens (weights are the
/// L1-normalized mask row), followed by the usual head.
pub fn fuse_avg_pool(
    params: &EncoderParams,
    states: &TokenStates,
    masks: &TokenMaskSet,
) -> Result<MaskEmbeddings> {
    check_states(params, states)?;
    let out = states.output();
    let n = params.dims.num_tokens();
    if masks.num_tokens() != n {
        return Err(Error::Shape(format!(
            "masks cover {} tokens, encoder has {n}",
            masks.num_tokens()
        )));
    }
    let mut weights = masks.matrix().clone();
    for q in 0..weights.rows() {
        let row = weights.row_mut(q);
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(Error::EmptyMask { row: q });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut pooled = Matrix::zeros(weights.rows(), params.dims.width);
    crate::linalg::gemm(
        1.0,
        weights.view(),
        out.block(1, n, 0, params.dims.width),
        0.0,
        &mut pooled,
    );
    Ok(head(params, &pooled))
}

/// Final norm, projection to `D` and L2 normalization.
pub fn head(params: &EncoderParams, tokens: &Matrix) -> MaskEmbeddings {
    let (ef, _) = layer_norm(tokens, &params.lnf_gamma, &params.lnf_beta);
    MaskEmbeddings(l2_normalize_rows(&ef.matmul(&params.proj)).0)
}

/// Everything the backward pass needs from one image's forward pass.
pub struct ForwardTrace {
    pass: ImagePass,
    fuse: FuseCache,
}

impl ForwardTrace {
    pub fn embeddings(&self) -> &Matrix {
        &self.fuse.out
    }

    pub fn attention(&self) -> Vec<Vec<Matrix>> {
        self.fuse.attention()
    }
}

impl EncoderParams {
    /// Image stream and mask fusion for one image, keeping activations for
    /// [`EncoderParams::backward`]. The last layer's image tokens are not
    /// computed since nothing downstream reads them.
    pub fn forward(&self, patches: &Matrix, masks: &TokenMaskSet) -> Result<ForwardTrace> {
        let pass = image_forward_cached(self, patches)?;
        let dims = self.dims;
        let kv: Vec<_> = (dims.extractor_layers + 1..=dims.layers)
            .map(|l| pass.kv(l))
            .collect();
        let cls = pass.inputs[dims.extractor_layers].row(0).to_vec();
        let fuse = fuse_forward(self, &cls, &kv, masks)?;
        Ok(ForwardTrace { pass, fuse })
    }

    pub fn encode_masks(&self, patches: &Matrix, masks: &TokenMaskSet) -> Result<MaskEmbeddings> {
        Ok(MaskEmbeddings(self.forward(patches, masks)?.fuse.out))
    }

    /// Backpropagate `d_emb` (gradient on the normalized embeddings). Gradients
    /// for the q/v projections of every layer and for `log α` accumulate into
    /// `grads`; all other entries of `grads` are left untouched. Returns the
    /// gradient on the patch matrix.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_emb: &Matrix,
        grads: &mut EncoderParams,
    ) -> Matrix {
        let dims = self.dims;
        let kv: Vec<_> = (dims.extractor_layers + 1..=dims.layers)
            .map(|l| trace.pass.kv(l))
            .collect();
        let fg = fuse_backward(self, &trace.fuse, &kv, d_emb, grads);
        let dtokens = image_backward(self, &trace.pass, &fg.dk, &fg.dv, &fg.d_cls, grads);
        let n = dims.num_tokens();
        let mut dpatch = Matrix::zeros(n, dims.patch_dim());
        crate::linalg::gemm(
            1.0,
            dtokens.block(1, n, 0, dims.width),
            self.patch_embed.view().t(),
            0.0,
            &mut dpatch,
        );
        dpatch
    }
}
