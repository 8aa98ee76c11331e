use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_tensor, write_tensor, Mask};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Class scores an external mask generator assigned to its own proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorScores {
    pub gen_vocab: Vec<String>,
    /// `Q` rows of probabilities over `gen_vocab`.
    pub gen_scores: Vec<Vec<f64>>,
    /// Generator category name → evaluation category index, for the names
    /// both vocabularies share.
    pub in_vocab_map: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposalSet {
    pub masks: Vec<Mask>,
    pub generator: Option<GeneratorScores>,
}

impl MaskProposalSet {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let first = self
            .masks
            .first()
            .ok_or_else(|| Error::Invalid("proposal set is empty".into()))?;
        if self
            .masks
            .iter()
            .any(|m| m.width != first.width || m.height != first.height)
        {
            return Err(Error::Shape("proposal masks differ in size".into()));
        }
        if self
            .masks
            .iter()
            .any(|m| m.values.iter().any(|&v| !(0.0..=1.0).contains(&v)))
        {
            return Err(Error::Invalid(
                "proposal mask values must lie in [0, 1]".into(),
            ));
        }
        let Some(g) = &self.generator else {
            return Ok(());
        };
        if g.gen_scores.len() != self.masks.len() {
            return Err(Error::Shape(format!(
                "{} proposals but {} generator score rows",
                self.masks.len(),
                g.gen_scores.len()
            )));
        }
        for (q, row) in g.gen_scores.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != g.gen_vocab.len()
                || row.iter().any(|&v| !(v >= 0.0))
                || (s - 1.0).abs() > 1e-4
            {
                return Err(Error::Invalid(format!(
                    "generator score row {q} is not a distribution over the generator vocabulary"
                )));
            }
        }
        for (name, &k) in &g.in_vocab_map {
            if !g.gen_vocab.contains(name) {
                return Err(Error::Invalid(format!(
                    "in_vocab_map names unknown generator category '{name}'"
                )));
            }
            if k >= num_classes {
                return Err(Error::Invalid(format!(
                    "in_vocab_map sends '{name}' to category {k}, outside {num_classes} evaluation classes"
                )));
            }
        }
        Ok(())
    }
}

/// Generator probabilities mapped onto the evaluation vocabulary (mass of all
/// generator names mapped to the same category is summed), and which
/// evaluation categories the generator covers.
pub fn generator_probabilities(
    g: &GeneratorScores,
    num_classes: usize,
) -> Result<(Matrix, Vec<bool>)> {
    let mut covered = vec![false; num_classes];
    let mut out = Matrix::zeros(g.gen_scores.len(), num_classes);
    for (gi, name) in g.gen_vocab.iter().enumerate() {
        let Some(&k) = g.in_vocab_map.get(name) else {
            continue;
        };
        if k >= num_classes {
            return Err(Error::Invalid(format!(
                "in_vocab_map category {k} out of range"
            )));
        }
        covered[k] = true;
        for (q, row) in g.gen_scores.iter().enumerate() {
            out[(q, k)] += row[gi];
        }
    }
    Ok((out, covered))
}

/// `dir/<id>.mcpp` holds the `Q × H × W` mask stack; `dir/<id>.json` the
/// generator scores, if any.
pub fn write_proposals(dir: &Path, id: &str, set: &MaskProposalSet) -> Result<()> {
    let first = set
        .masks
        .first()
        .ok_or_else(|| Error::Invalid("proposal set is empty".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let values: Vec<f64> = set
        .masks
        .iter()
        .flat_map(|m| m.values.iter().copied())
        .collect();
    write_tensor(
        dir.join(format!("{id}.mcpp")),
        &[set.masks.len(), first.height, first.width],
        &values,
    )?;
    if let Some(g) = &set.generator {
        let p = dir.join(format!("{id}.json"));
        std::fs::write(&p, serde_json::to_string_pretty(g)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_proposals(dir: &Path, id: &str, num_classes: usize) -> Result<MaskProposalSet> {
    let mp = dir.join(format!("{id}.mcpp"));
    let t = read_tensor(&mp)?;
    let [q, h, w] = t.dims[..] else {
        return Err(Error::format(
            &mp,
            format!("expected a Q x H x W stack, got dims {:?}", t.dims),
        ));
    };
    let masks = t
        .values
        .chunks_exact(h * w)
        .take(q)
        .map(|c| Mask::new(w, h, c.to_vec()))
        .collect();
    let jp = dir.join(format!("{id}.json"));
    let generator = if jp.exists() {
        let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::format(&jp, e.to_string()))?)
    } else {
        None
    };
    let set = MaskProposalSet { masks, generator };
    set.validate(num_classes)
        .map_err(|e| Error::format(&mp, e.to_string()))?;
    Ok(set)
}
