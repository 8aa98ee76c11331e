use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm::{read_pgm, read_ppm};
use super::{Image, Mask, SegmentationSample, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub split: String,
    pub image: String,
    pub mask: String,
    /// Category of instance `j`, whose mask raster value is `j + 1`.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    pub image_size: usize,
    pub categories: Vec<String>,
    pub samples: Vec<IndexEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Vec<&SegmentationSample> {
        self.samples.iter().filter(|s| s.split == name).collect()
    }

    pub fn split_owned(&self, name: &str) -> Vec<SegmentationSample> {
        self.split(name).into_iter().cloned().collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vp = dir.join("vocab.txt");
    let vocab_text = std::fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
    let names: Vec<String> = vocab_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let vocab = Vocabulary::new(names).map_err(|e| Error::format(&vp, e.to_string()))?;

    let ip = dir.join("index.json");
    let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    let index: IndexFile =
        serde_json::from_str(&text).map_err(|e| Error::format(&ip, e.to_string()))?;

    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in &index.samples {
        let image_path = dir.join(&entry.image);
        let (w, h, rgb) = read_ppm(&image_path)?;
        let mask_path = dir.join(&entry.mask);
        let (mw, mh, ids) = read_pgm(&mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(Error::format(
                &mask_path,
                format!("mask is {mw}x{mh} but image is {w}x{h}"),
            ));
        }
        let q = entry.labels.len();
        if q == 0 {
            return Err(Error::format(
                &ip,
                format!("sample {} has no instances", entry.id),
            ));
        }
        if let Some(&bad) = entry.labels.iter().find(|&&l| l >= vocab.len()) {
            return Err(Error::format(
                &ip,
                format!(
                    "sample {}: label {bad} outside vocabulary of {}",
                    entry.id,
                    vocab.len()
                ),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&v| v as usize > q) {
            return Err(Error::format(
                &mask_path,
                format!(
                    "instance id {bad} but sample {} lists {q} instances",
                    entry.id
                ),
            ));
        }
        let masks: Vec<Mask> = (1..=q)
            .map(|id| {
                let values = ids
                    .iter()
                    .map(|&v| if v as usize == id { 1.0 } else { 0.0 })
                    .collect();
                Mask::new(w, h, values)
            })
            .collect();
        if let Some(j) = masks.iter().position(|m| m.area() == 0) {
            return Err(Error::format(
                &mask_path,
                format!("instance {j} of sample {} has no pixels", entry.id),
            ));
        }
        samples.push(SegmentationSample {
            id: entry.id.clone(),
            split: entry.split.clone(),
            image: Image {
                width: w,
                height: h,
                rgb,
            },
            masks,
            labels: entry.labels.clone(),
        });
    }
    Ok(Dataset { vocab, samples })
}
