use serde::{Deserialize, Serialize};

use super::{Image, Mask};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `Q × N` soft masks on the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMaskSet {
    values: Matrix,
}

impl TokenMaskSet {
    pub fn new(values: Matrix) -> Result<Self> {
        for (q, row) in values.iter_rows().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!(
                    "mask row {q} has values outside [0,1]"
                )));
            }
            if !row.iter().any(|&v| v > 0.0) {
                return Err(Error::EmptyMask { row: q });
            }
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_tokens(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.values.row(q)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn select(&self, idx: &[usize]) -> TokenMaskSet {
        TokenMaskSet {
            values: self.values.select_rows(idx),
        }
    }
}

/// Overlap of pixel span `[p, p+1)` with cell `[c·len, (c+1)·len)` for every cell.
fn overlap_weights(pixels: usize, cells: usize) -> Matrix {
    let len = pixels as f64 / cells as f64;
    let mut w = Matrix::zeros(cells, pixels);
    for c in 0..cells {
        let lo = c as f64 * len;
        let hi = (c + 1) as f64 * len;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(pixels);
        for p in first..last {
            let ov = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
            w[(c, p)] = ov;
        }
    }
    w
}

/// Area-averaged pooling of a pixel mask onto a `(g_h, g_w)` token grid.
///
/// Each cell receives the mean mask value over its (possibly fractional)
/// pixel footprint, so `Σ cell·cell_area` equals the mask's total mass.
pub fn mask_to_token_grid(mask: &Mask, grid: (usize, usize)) -> Result<Vec<f64>> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || mask.width == 0 || mask.height == 0 {
        return Err(Error::Invalid("empty grid or mask".into()));
    }
    let wy = overlap_weights(mask.height, gh);
    let wx = overlap_weights(mask.width, gw);
    let m = Matrix::from_vec(mask.height, mask.width, mask.values.clone());
    let pooled = wy.matmul(&m).matmul_t(&wx);
    let area = (mask.height as f64 / gh as f64) * (mask.width as f64 / gw as f64);
    let out: Vec<f64> = pooled
        .as_slice()
        .iter()
        .map(|v| (v / area).clamp(0.0, 1.0))
        .collect();
    if out.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyMask { row: 0 });
    }
    Ok(out)
}

/// How ground-truth instances are presented to the model during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPrior {
    /// The instance mask itself.
    #[default]
    Mask,
    /// The mask's bounding rectangle.
    Box,
    /// A single token cell: the one with the highest mask coverage.
    Pixel,
}

pub fn bounding_box_mask(mask: &Mask) -> Mask {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) >= 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    Mask::from_fn(mask.width, mask.height, |x, y| {
        if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn prior_token_row(mask: &Mask, grid: (usize, usize), prior: MaskPrior) -> Result<Vec<f64>> {
    match prior {
        MaskPrior::Mask => mask_to_token_grid(mask, grid),
        MaskPrior::Box => mask_to_token_grid(&bounding_box_mask(mask), grid),
        MaskPrior::Pixel => {
            let row = mask_to_token_grid(mask, grid)?;
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            let mut out = vec![0.0; row.len()];
            out[best] = 1.0;
            Ok(out)
        }
    }
}

/// Split an image into `grid` patches, each flattened as `(dy, dx, channel)` with
/// pixel values scaled to `[-1, 1]`. Image sides must be multiples of the grid.
pub fn patchify(image: &Image, grid: (usize, usize)) -> Result<Matrix> {
    let (gh, gw) = grid;
    if image.height % gh != 0 || image.width % gw != 0 || image.height / gh != image.width / gw {
        return Err(Error::Shape(format!(
            "{}x{} image does not tile into a {gh}x{gw} grid of square patches",
            image.width, image.height
        )));
    }
    let p = image.height / gh;
    let mut out = Matrix::zeros(gh * gw, 3 * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut i = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((gy * p + dy) * image.width + gx * p + dx) * 3;
                    for ch in 0..3 {
                        row[i] = image.rgb[base + ch] as f64 / 127.5 - 1.0;
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_mask() {
        let m = Mask::new(5, 7, vec![1.0; 35]);
        let row = mask_to_token_grid(&m, (3, 2)).unwrap();
        assert!(row.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn quadrant_mask() {
        let m = Mask::from_fn(4, 4, |x, y| if x < 2 && y < 2 { 1.0 } else { 0.0 });
        assert_eq!(
            mask_to_token_grid(&m, (2, 2)).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn fractional_cells_preserve_area() {
        let m = Mask::new(3, 3, vec![1.0; 9]);
        let row = mask_to_token_grid(&m, (2, 2)).unwrap();
        let cell_area = 1.5 * 1.5;
        assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        let mass: f64 = row.iter().map(|v| v * cell_area).sum();
        assert!((mass - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_flagged() {
        let m = Mask::new(4, 4, vec![0.0; 16]);
        assert!(matches!(
            mask_to_token_grid(&m, (2, 2)),
            Err(Error::EmptyMask { .. })
        ));
    }

    #[test]
    fn priors() {
        // an L-shaped instance: its box is the full 4x4 square
        let m = Mask::from_fn(4, 4, |x, y| if x == 0 || y == 3 { 1.0 } else { 0.0 });
        let b = prior_token_row(&m, (2, 2), MaskPrior::Box).unwrap();
        assert_eq!(b, vec![1.0; 4]);
        let p = prior_token_row(&m, (2, 2), MaskPrior::Pixel).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn patch_layout() {
        let mut rgb = vec![0u8; 4 * 4 * 3];
        // red channel of pixel (x=2, y=1) lands in patch 1, position (dy=1, dx=0)
        rgb[(4 + 2) * 3] = 255;
        let img = Image {
            width: 4,
            height: 4,
            rgb,
        };
        let p = patchify(&img, (2, 2)).unwrap();
        assert_eq!(p.shape(), (4, 12));
        assert_eq!(p[(1, (2 * 1) * 3)], 1.0);
        assert_eq!(p[(0, 0)], -1.0);
    }

    proptest! {
        #[test]
        fn pooling_conserves_mass(
            w in 1usize..20, h in 1usize..20, gw in 1usize..6, gh in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut s = seed | 1;
            let vals: Vec<f64> = (0..w * h).map(|_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s % 1000) as f64 / 999.0
            }).collect();
            let m = Mask::new(w, h, vals.clone());
            let total: f64 = vals.iter().sum();
            match mask_to_token_grid(&m, (gh, gw)) {
                Ok(row) => {
                    let area = (h as f64 / gh as f64) * (w as f64 / gw as f64);
                    let mass: f64 = row.iter().map(|v| v * area).sum();
                    prop_assert!((mass - total).abs() < 1e-9);
                    prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                Err(_) => prop_assert_eq!(total, 0.0),
            }
        }
    }
}
