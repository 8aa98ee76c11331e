use super::{assemble_semantic, SemanticPrediction};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// IoU of two masks thresholded at 0.5; `0` when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "masks are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Maximum-weight one-to-one matching of rows to columns (Kuhn-Munkres with
/// potentials, O(n³)). `result[row]` is the matched column, `None` when the
/// matrix has more rows than columns and the row is left over.
pub fn hungarian_max(weights: &Matrix) -> Vec<Option<usize>> {
    let (rows, cols) = weights.shape();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| {
        if i < rows && j < cols {
            -weights[(i, j)]
        } else {
            0.0
        }
    };
    // 1-based arrays; p[j] is the row assigned to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Exhaustive maximum-weight matching total over all partial matchings. For
/// non-negative weights this equals the optimum of [`hungarian_max`].
pub fn brute_force_assignment(weights: &Matrix) -> f64 {
    fn go(w: &Matrix, row: usize, used: &mut [bool]) -> f64 {
        if row == w.rows() {
            return 0.0;
        }
        let mut best = go(w, row + 1, used);
        for j in 0..w.cols() {
            if !used[j] {
                used[j] = true;
                best = best.max(w[(row, j)] + go(w, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(weights, 0, &mut vec![false; weights.cols()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleAssignment {
    /// Ground-truth instance matched to each proposal.
    pub matches: Vec<Option<usize>>,
    /// One-hot rows for matched proposals, uniform for the rest.
    pub probabilities: Matrix,
    pub prediction: SemanticPrediction,
}

/// Relabel proposals with ground-truth categories through maximum-IoU
/// bipartite matching. Pairs with zero overlap are not considered matches.
pub fn oracle_assign(
    proposals: &[Mask],
    gt_masks: &[Mask],
    gt_labels: &[usize],
    num_classes: usize,
) -> Result<OracleAssignment> {
    if proposals.is_empty() {
        return Err(Error::Invalid(
            "oracle assignment needs at least one proposal".into(),
        ));
    }
    if gt_masks.len() != gt_labels.len() {
        return Err(Error::Shape(format!(
            "{} masks, {} labels",
            gt_masks.len(),
            gt_labels.len()
        )));
    }
    if num_classes == 0 || gt_labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Invalid(format!(
            "ground-truth label outside {num_classes} classes"
        )));
    }
    let mut w = Matrix::zeros(proposals.len(), gt_masks.len());
    for (i, p) in proposals.iter().enumerate() {
        for (j, g) in gt_masks.iter().enumerate() {
            w[(i, j)] = iou(p, g)?;
        }
    }
    let matches: Vec<Option<usize>> = hungarian_max(&w)
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.filter(|&j| w[(i, j)] > 0.0))
        .collect();
    let mut probs = Matrix::from_vec(
        proposals.len(),
        num_classes,
        vec![1.0 / num_classes as f64; proposals.len() * num_classes],
    );
    for (i, m) in matches.iter().enumerate() {
        if let Some(j) = *m {
            let row = probs.row_mut(i);
            row.fill(0.0);
            row[gt_labels[j]] = 1.0;
        }
    }
    let prediction = assemble_semantic(proposals, &probs, 0.0)?;
    Ok(OracleAssignment {
        matches,
        probabilities: probs,
        prediction,
    })
}
