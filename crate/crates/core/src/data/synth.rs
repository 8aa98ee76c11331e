//! Procedural shape scenes: colored disks, squares and triangles on a noisy
//! background. Each category is one (color, shape) pair.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{IndexEntry, IndexFile};
use super::pnm::{encode_pgm16, encode_ppm};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                let h = 0.866 * r;
                let v = [(0.0, -r), (-h, 0.5 * r), (h, 0.5 * r)];
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
                };
                let s = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                s.iter().all(|&e| e <= 0.0) || s.iter().all(|&e| e >= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [u8; 3],
}

impl ColorSpec {
    pub fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<ColorSpec>,
    /// Inclusive `[min, max]` instance count per image.
    pub shapes_per_image: [usize; 2],
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    /// The 2×2 (red, blue) × (disk, square) setup used by the acceptance runs.
    pub fn four_category(n_train: usize, n_val: usize, seed: u64) -> Self {
        Self {
            n_train,
            n_val,
            image_size: 64,
            shapes: vec![Shape::Disk, Shape::Square],
            colors: vec![
                ColorSpec::new("red", [200, 40, 40]),
                ColorSpec::new("blue", [40, 70, 210]),
            ],
            shapes_per_image: [1, 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Invalid(
                "shape and color lists must be non-empty".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Invalid("image_size must be at least 8".into()));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Invalid(format!("bad shapes_per_image [{lo}, {hi}]")));
        }
        if self.n_train + self.n_val == 0 {
            return Err(Error::Invalid("dataset would be empty".into()));
        }
        Ok(())
    }

    /// Category names in vocabulary order: colors outer, shapes inner.
    pub fn categories(&self) -> Vec<String> {
        self.colors
            .iter()
            .flat_map(|c| {
                self.shapes
                    .iter()
                    .map(move |s| format!("{} {}", c.name, s.name()))
            })
            .collect()
    }

    fn category(&self, k: usize) -> (Shape, [u8; 3]) {
        let n = self.shapes.len();
        (self.shapes[k % n], self.colors[k / n].rgb)
    }
}

struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
    category: usize,
}

/// Draw one scene. Returns RGB bytes, the instance-id raster and per-instance
/// category labels (instance `j` has raster value `j + 1`).
fn render(
    spec: &SyntheticDatasetSpec,
    rng: &mut ChaCha8Rng,
    anchor: usize,
) -> (Vec<u8>, Vec<u16>, Vec<usize>) {
    let size = spec.image_size;
    let k = spec.categories().len();
    let sz = size as f64;
    let [lo, hi] = spec.shapes_per_image;
    let count = rng.gen_range(lo..=hi);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for j in 0..count {
        // the last-drawn (topmost) instance cycles through categories so every
        // category shows up in each split
        let category = if j + 1 == count {
            anchor % k
        } else {
            rng.gen_range(0..k)
        };
        let mut cand = Placed {
            cx: 0.0,
            cy: 0.0,
            r: 0.0,
            category,
        };
        for _ in 0..30 {
            let r = rng.gen_range(sz / 9.0..sz / 5.0);
            cand.r = r;
            cand.cx = rng.gen_range(r..sz - r);
            cand.cy = rng.gen_range(r..sz - r);
            let clear = placed.iter().all(|p| {
                let d = ((p.cx - cand.cx).powi(2) + (p.cy - cand.cy).powi(2)).sqrt();
                d >= 0.8 * (p.r + cand.r)
            });
            if clear {
                break;
            }
        }
        placed.push(cand);
    }

    let bg = rng.gen_range(50i32..110);
    let mut rgb = vec![0u8; size * size * 3];
    for px in rgb.chunks_mut(3) {
        for c in px.iter_mut() {
            *c = (bg + rng.gen_range(-6i32..=6)).clamp(0, 255) as u8;
        }
    }
    let mut ids = vec![0u16; size * size];
    for (j, p) in placed.iter().enumerate() {
        let (shape, base) = spec.category(p.category);
        let tint: [i32; 3] = std::array::from_fn(|c| base[c] as i32 + rng.gen_range(-12i32..=12));
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - p.cx;
                let dy = y as f64 + 0.5 - p.cy;
                if shape.contains(dx, dy, p.r) {
                    ids[y * size + x] = (j + 1) as u16;
                    let px = &mut rgb[(y * size + x) * 3..(y * size + x) * 3 + 3];
                    for c in 0..3 {
                        px[c] = (tint[c] + rng.gen_range(-6i32..=6)).clamp(0, 255) as u8;
                    }
                }
            }
        }
    }

    // drop fully occluded instances and renumber the survivors
    let mut remap = vec![0u16; placed.len() + 1];
    let mut labels = Vec::new();
    for j in 0..placed.len() {
        let id = (j + 1) as u16;
        if ids.contains(&id) {
            labels.push(placed[j].category);
            remap[j + 1] = labels.len() as u16;
        } else {
            log::warn!("instance {j} fully occluded; dropped");
        }
    }
    for v in ids.iter_mut() {
        *v = remap[*v as usize];
    }
    (rgb, ids, labels)
}

/// Write a dataset directory: `images/NNNN.ppm`, `masks/NNNN.pgm`,
/// `index.json` and `vocab.txt`. Output bytes depend only on `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, out: &Path) -> Result<IndexFile> {
    spec.validate()?;
    let k = spec.categories().len();
    if spec.n_train < k || (spec.n_val > 0 && spec.n_val < k) {
        log::warn!("split smaller than the {k} categories; some will be missing");
    }
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let size = spec.image_size;
    let mut entries = Vec::with_capacity(spec.n_train + spec.n_val);
    let splits = [("train", spec.n_train), ("val", spec.n_val)];
    let mut index = 0usize;
    for (split, n) in splits {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let (rgb, ids, labels) = render(spec, &mut rng, i);
            let id = format!("{index:04}");
            let image = format!("images/{id}.ppm");
            let mask = format!("masks/{id}.pgm");
            let ip = out.join(&image);
            std::fs::write(&ip, encode_ppm(size, size, &rgb)).map_err(|e| Error::io(&ip, e))?;
            let mp = out.join(&mask);
            std::fs::write(&mp, encode_pgm16(size, size, &ids)).map_err(|e| Error::io(&mp, e))?;
            entries.push(IndexEntry {
                id,
                split: split.to_string(),
                image,
                mask,
                labels,
            });
            index += 1;
        }
    }
    let index_file = IndexFile {
        version: 1,
        image_size: size,
        categories: spec.categories(),
        samples: entries,
    };
    let ip = out.join("index.json");
    let json = serde_json::to_string_pretty(&index_file)?;
    std::fs::write(&ip, json).map_err(|e| Error::io(&ip, e))?;
    let vp = out.join("vocab.txt");
    let mut vocab = spec.categories().join("\n");
    vocab.push('\n');
    std::fs::write(&vp, vocab).map_err(|e| Error::io(&vp, e))?;
    Ok(index_file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_cross_product() {
        let mut spec = SyntheticDatasetSpec::four_category(2, 0, 1);
        assert_eq!(
            spec.categories(),
            vec!["red disk", "red square", "blue disk", "blue square"]
        );
        spec.shapes.push(Shape::Triangle);
        assert_eq!(spec.categories().len(), 6);
    }

    #[test]
    fn empty_lists_rejected() {
        let mut spec = SyntheticDatasetSpec::four_category(2, 0, 1);
        spec.colors.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shapes_differ() {
        // a corner point is inside the square only
        assert!(Shape::Square.contains(0.8, 0.8, 1.0));
        assert!(!Shape::Disk.contains(0.8, 0.8, 1.0));
        assert!(Shape::Triangle.contains(0.0, 0.0, 1.0));
        assert!(
            !Shape::Triangle.contains(0.0, 0.9, 1.0) || !Shape::Triangle.contains(0.8, -0.8, 1.0)
        );
    }
}
