//! Dataset formats, synthetic data, mask rasterization onto the token grid and
//! the `MCPP` tensor container.

mod dataset;
mod grid;
pub mod pnm;
mod synth;
pub mod tensorfile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, Dataset, IndexEntry, IndexFile};
pub use grid::{
    bounding_box_mask, mask_to_token_grid, patchify, prior_token_row, MaskPrior, TokenMaskSet,
};
pub use synth::{generate_synthetic_dataset, ColorSpec, Shape, SyntheticDatasetSpec};
pub use tensorfile::{read_tensor, write_tensor, Tensor};

pub const DEFAULT_TEMPLATE: &str = "A photo of {}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
    templates: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Self::with_templates(names, vec![DEFAULT_TEMPLATE.to_string()])
    }

    pub fn with_templates(names: Vec<String>, templates: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Invalid("empty category name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Invalid(format!("duplicate category name '{n}'")));
            }
        }
        if templates.is_empty() {
            return Err(Error::Invalid(
                "at least one prompt template is required".into(),
            ));
        }
        for t in &templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::Invalid(format!(
                    "template '{t}' must contain exactly one '{{}}' placeholder"
                )));
            }
        }
        Ok(Self { names, templates })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Every prompt for category `k`, one per template.
    pub fn prompts(&self, k: usize) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen("{}", &self.names[k], 1))
            .collect()
    }

    /// Digest binding embeddings to this exact name list.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.names {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Per-pixel mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixels with value ≥ 0.5.
    pub fn binary(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub split: String,
    pub image: Image,
    pub masks: Vec<Mask>,
    pub labels: Vec<usize>,
}

impl SegmentationSample {
    /// Category raster: `Some(k)` where an instance covers the pixel, `None` for void.
    /// Later instances take precedence where masks overlap.
    pub fn label_raster(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.image.width * self.image.height];
        for (m, &l) in self.masks.iter().zip(&self.labels) {
            for (o, &v) in out.iter_mut().zip(&m.values) {
                if v >= 0.5 {
                    *o = Some(l);
                }
            }
        }
        out
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.masks.is_empty() || self.masks.len() != self.labels.len() {
            return Err(Error::Invalid(format!(
                "sample {}: {} masks, {} labels",
                self.id,
                self.masks.len(),
                self.labels.len()
            )));
        }
        for (i, (m, &l)) in self.masks.iter().zip(&self.labels).enumerate() {
            if l >= num_classes {
                return Err(Error::Invalid(format!(
                    "sample {}: instance {i} label {l} outside vocabulary of {num_classes}",
                    self.id
                )));
            }
            if m.width != self.image.width || m.height != self.image.height {
                return Err(Error::Shape(format!("sample {}: mask {i} size", self.id)));
            }
            if !m.values.iter().any(|&v| v >= 0.5) {
                return Err(Error::Invalid(format!(
                    "sample {}: instance {i} is empty",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rules() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec!["".into()]).is_err());
        assert!(Vocabulary::with_templates(vec!["a".into()], vec!["no slot".into()]).is_err());
        assert!(Vocabulary::with_templates(vec!["a".into()], vec!["{} {}".into()]).is_err());
        let v = Vocabulary::new(vec!["red disk".into()]).unwrap();
        assert_eq!(v.prompts(0), vec!["A photo of red disk".to_string()]);
    }

    #[test]
    fn vocabulary_hash_depends_on_order() {
        let a = Vocabulary::new(vec!["x".into(), "y".into()]).unwrap();
        let b = Vocabulary::new(vec!["y".into(), "x".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
