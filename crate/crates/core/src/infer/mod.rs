//! Mask classification with a trained model, fusion with an external mask
//! generator's scores, semantic-map assembly and the evaluation metrics.

mod matching;
mod proposals;

use crate::data::{
    mask_to_token_grid, patchify, prior_token_row, Mask, MaskPrior, SegmentationSample,
    TokenMaskSet,
};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::psm::{apply_psm, argmax, raw_similarity, PsmParams};

pub use matching::{brute_force_assignment, hungarian_max, iou, oracle_assign, OracleAssignment};
pub use proposals::{
    generator_probabilities, read_proposals, write_proposals, GeneratorScores, MaskProposalSet,
};

/// Row-stochastic `Q × K` class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities(pub Matrix);

impl ClassProbabilities {
    /// Validates rows: entries ≥ 0, sums within 1e-6 of 1.
    pub fn new(values: Matrix) -> Result<Self> {
        for (q, row) in values.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "probability row {q} is not on the simplex (sum {s})"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

/// One image ready for the encoder: patches, token-grid masks and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub patches: Matrix,
    pub masks: TokenMaskSet,
    pub labels: Vec<usize>,
}

impl PreparedSample {
    /// Keep only the masks whose label is in `categories`, relabeled to their
    /// position in that list. `None` if nothing is left.
    pub fn restrict(&self, categories: &[usize]) -> Option<PreparedSample> {
        let keep: Vec<usize> = (0..self.labels.len())
            .filter(|&i| categories.contains(&self.labels[i]))
            .collect();
        if keep.is_empty() {
            return None;
        }
        Some(PreparedSample {
            id: self.id.clone(),
            patches: self.patches.clone(),
            masks: self.masks.select(&keep),
            labels: keep
                .iter()
                .map(|&i| {
                    categories
                        .iter()
                        .position(|&c| c == self.labels[i])
                        .unwrap()
                })
                .collect(),
        })
    }
}

pub fn prepare_sample(
    sample: &SegmentationSample,
    encoder: &EncoderParams,
    prior: MaskPrior,
) -> Result<PreparedSample> {
    let g = encoder.dims.grid;
    let size = encoder.dims.image_size();
    if sample.image.width != size || sample.image.height != size {
        return Err(Error::Shape(format!(
            "sample {}: image is {}x{}, encoder expects {size}x{size}",
            sample.id, sample.image.width, sample.image.height
        )));
    }
    let rows = sample
        .masks
        .iter()
        .map(|m| prior_token_row(m, (g, g), prior))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Invalid(format!("sample {}: {e}", sample.id)))?;
    Ok(PreparedSample {
        id: sample.id.clone(),
        patches: patchify(&sample.image, (g, g))?,
        masks: TokenMaskSet::from_rows(&rows)?,
        labels: sample.labels.clone(),
    })
}

pub fn prepare_samples<'a>(
    samples: impl IntoIterator<Item = &'a SegmentationSample>,
    encoder: &EncoderParams,
    prior: MaskPrior,
) -> Result<Vec<PreparedSample>> {
    samples
        .into_iter()
        .map(|s| prepare_sample(s, encoder, prior))
        .collect()
}

/// Everything needed to score masks against a fixed set of categories.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub encoder: &'a EncoderParams,
    pub psm: &'a PsmParams,
    /// `K × D` text embeddings of the categories to choose among.
    pub text: &'a Matrix,
    /// Off: score with the raw cosine similarity of the same encoder.
    pub use_psm: bool,
}

impl Scorer<'_> {
    /// `R` (or `S` with the head disabled) for one image.
    pub fn similarities(&self, patches: &Matrix, masks: &TokenMaskSet) -> Result<Matrix> {
        let emb = self.encoder.encode_masks(patches, masks)?;
        if self.use_psm {
            apply_psm(self.psm, emb.matrix(), self.text)
        } else {
            raw_similarity(emb.matrix(), self.text)
        }
    }

    pub fn probabilities(
        &self,
        patches: &Matrix,
        masks: &TokenMaskSet,
    ) -> Result<ClassProbabilities> {
        let r = self.similarities(patches, masks)?;
        Ok(ClassProbabilities(crate::psm::class_probabilities(
            &r,
            self.psm.log_logit_scale,
        )))
    }
}

/// Classify pixel-space masks on one image. Masks too small to cover any
/// token are given uniform probabilities.
pub fn classify_masks(
    scorer: &Scorer<'_>,
    image: &crate::data::Image,
    masks: &[Mask],
) -> Result<ClassProbabilities> {
    if masks.is_empty() {
        return Err(Error::Invalid("no mask proposals to classify".into()));
    }
    let g = scorer.encoder.dims.grid;
    let patches = patchify(image, (g, g))?;
    let k = scorer.text.rows();
    let mut rows = Vec::new();
    let mut live = Vec::new();
    for (q, m) in masks.iter().enumerate() {
        match mask_to_token_grid(m, (g, g)) {
            Ok(r) => {
                rows.push(r);
                live.push(q);
            }
            Err(Error::EmptyMask { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut out = Matrix::from_vec(masks.len(), k, vec![1.0 / k as f64; masks.len() * k]);
    if !rows.is_empty() {
        let p = scorer.probabilities(&patches, &TokenMaskSet::from_rows(&rows)?)?;
        for (i, &q) in live.iter().enumerate() {
            out.row_mut(q).copy_from_slice(p.0.row(i));
        }
    }
    Ok(ClassProbabilities(out))
}

/// Which masks count and which categories compete in [`mask_acc`].
#[derive(Clone, Debug, Default)]
pub struct MaskAccOptions {
    /// Candidate categories (rows of the text matrix); all when `None`.
    pub candidates: Option<Vec<usize>>,
    /// Only masks with these labels are scored; all when `None`.
    pub evaluate: Option<Vec<usize>>,
}

/// Fraction of masks whose top-1 category equals the annotation.
pub fn mask_acc(
    encoder: &EncoderParams,
    psm: &PsmParams,
    text: &Matrix,
    samples: &[PreparedSample],
    use_psm: bool,
    opts: &MaskAccOptions,
) -> Result<f64> {
    let (correct, total) = mask_acc_counts(encoder, psm, text, samples, use_psm, opts)?;
    if total == 0 {
        return Err(Error::Invalid(
            "mask accuracy over an empty set of masks".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

pub fn mask_acc_counts(
    encoder: &EncoderParams,
    psm: &PsmParams,
    text: &Matrix,
    samples: &[PreparedSample],
    use_psm: bool,
    opts: &MaskAccOptions,
) -> Result<(usize, usize)> {
    let candidates: Vec<usize> = opts
        .candidates
        .clone()
        .unwrap_or_else(|| (0..text.rows()).collect());
    if let Some(&bad) = candidates.iter().find(|&&c| c >= text.rows()) {
        return Err(Error::Invalid(format!(
            "candidate category {bad} out of range"
        )));
    }
    let sub_text = text.select_rows(&candidates);
    let scorer = Scorer {
        encoder,
        psm,
        text: &sub_text,
        use_psm,
    };
    let (mut correct, mut total) = (0, 0);
    for s in samples {
        let keep: Vec<usize> = (0..s.labels.len())
            .filter(|&i| {
                opts.evaluate
                    .as_ref()
                    .is_none_or(|e| e.contains(&s.labels[i]))
            })
            .collect();
        if keep.is_empty() {
            continue;
        }
        let r = scorer.similarities(&s.patches, &s.masks.select(&keep))?;
        for (row, &i) in r.iter_rows().zip(&keep) {
            total += 1;
            if candidates[argmax(row)] == s.labels[i] {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

/// `P_γ = P_s^γ · P_c^(1−γ)` on categories the generator covers, `P_c`
/// elsewhere. Not renormalized.
pub fn ensemble(
    p_c: &ClassProbabilities,
    p_s: &Matrix,
    covered: &[bool],
    gamma: f64,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let pc = p_c.matrix();
    if pc.shape() != p_s.shape() || covered.len() != pc.cols() {
        return Err(Error::Shape(format!(
            "P_c is {}x{}, P_s {}x{}, coverage mask {}",
            pc.rows(),
            pc.cols(),
            p_s.rows(),
            p_s.cols(),
            covered.len()
        )));
    }
    let mut out = pc.clone();
    for q in 0..pc.rows() {
        for k in 0..pc.cols() {
            if covered[k] {
                out[(q, k)] = p_s[(q, k)].powf(gamma) * pc[(q, k)].powf(1.0 - gamma);
            }
        }
    }
    Ok(out)
}

/// Per-pixel category raster; `None` is void.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrediction {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Option<usize>>,
}

/// Pixel score for class `k` is `Σ_q mask_q(pixel)·P[q, k]`; the label is the
/// argmax, or void when the best score is below `threshold_void` or no mask
/// covers the pixel.
pub fn assemble_semantic(
    masks: &[Mask],
    probs: &Matrix,
    threshold_void: f64,
) -> Result<SemanticPrediction> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Invalid("no masks to assemble".into()))?;
    let (w, h) = (first.width, first.height);
    if masks.iter().any(|m| m.width != w || m.height != h) || probs.rows() != masks.len() {
        return Err(Error::Shape(format!(
            "{} masks against {} probability rows, or masks of differing size",
            masks.len(),
            probs.rows()
        )));
    }
    let k = probs.cols();
    let mut scores = vec![0.0; k];
    let mut labels = Vec::with_capacity(w * h);
    for px in 0..w * h {
        scores.fill(0.0);
        let mut covered = false;
        for (q, m) in masks.iter().enumerate() {
            let v = m.values[px];
            if v > 0.0 {
                covered = true;
                for (s, &p) in scores.iter_mut().zip(probs.row(q)) {
                    *s += v * p;
                }
            }
        }
        let best = argmax(&scores);
        labels.push((covered && k > 0 && scores[best] >= threshold_void).then_some(best));
    }
    Ok(SemanticPrediction {
        width: w,
        height: h,
        labels,
    })
}

/// Running per-class intersection and union counts.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            intersection: vec![0; k],
            union: vec![0; k],
        }
    }

    /// Void ground-truth pixels are skipped entirely.
    pub fn add(&mut self, pred: &[Option<usize>], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.union.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let Some(g) = g else { continue };
            if g >= k || p.is_some_and(|p| p >= k) {
                return Err(Error::Invalid(format!("label outside {k} classes")));
            }
            self.union[g] += 1;
            match p {
                Some(p) if p == g => self.intersection[g] += 1,
                Some(p) => self.union[p] += 1,
                None => {}
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &SemanticPrediction, gt: &[Option<usize>], k: usize) -> Result<MiouReport> {
    let mut acc = IouAccumulator::new(k);
    acc.add(&pred.labels, gt)?;
    Ok(acc.report())
}
