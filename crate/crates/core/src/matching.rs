//! Box algebra and bipartite assignment: IoU/GIoU, detection-to-label cost
//! matrices, optimal (Hungarian) and greedy matching, plus the two
//! postprocessing flavours — score-only query filtering and classic NMS.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{BBox, GroundTruth};
use crate::evalkit::Detection;

/// Intersection-over-union of two center-format boxes, in [0, 1].
/// Zero-area boxes yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU, in (-1, 1]. Equals IoU when the enclosing box equals the
/// union; well-defined for zero-area boxes through the enclosing-box term.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclose = ew * eh;
    let iou_v = if union <= 0.0 { 0.0 } else { inter / union };
    if enclose <= 0.0 {
        iou_v
    } else {
        iou_v - (enclose - union) / enclose
    }
}

/// Component weights for the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Rectangular prediction-by-label cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
    pub weights: CostWeights,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }
}

/// One-to-one pairing of prediction rows to label columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (prediction index, label index) pairs, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.entries[[i, j]]).sum()
    }

    pub fn is_valid_for(&self, rows: usize, cols: usize) -> bool {
        let mut rs = std::collections::HashSet::new();
        let mut cs = std::collections::HashSet::new();
        self.pairs.iter().all(|&(i, j)| {
            i < rows && j < cols && rs.insert(i) && cs.insert(j)
        })
    }
}

/// Builds the DETR-style matching cost: `w_cls * -p(class_gt) + w_l1 * |Δbox|_1
/// + w_giou * -GIoU`. Class probabilities come from sigmoid logits.
pub fn build_cost(
    pred_logits: ArrayView2<f64>,
    pred_boxes: &[BBox],
    gt: &GroundTruth,
    weights: CostWeights,
) -> CostMatrix {
    let n = pred_boxes.len();
    let m = gt.boxes.len();
    assert_eq!(pred_logits.nrows(), n, "logits/boxes row mismatch");
    let mut entries = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let cls_id = gt.class_ids[j];
            let p = sigmoid(pred_logits[[i, cls_id]]);
            let gb = &gt.boxes[j];
            let pb = &pred_boxes[i];
            let l1 = (pb.cx - gb.cx).abs()
                + (pb.cy - gb.cy).abs()
                + (pb.w - gb.w).abs()
                + (pb.h - gb.h).abs();
            entries[[i, j]] =
                weights.cls * (-p) + weights.l1 * l1 + weights.giou * (-giou(pb, gb));
        }
    }
    CostMatrix { entries, weights }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Optimal assignment minimizing total cost; size = min(rows, cols).
///
/// Exact-cost ties between optima break toward the lexicographically smallest
/// pair list via an infinitesimal index-ordered perturbation.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    assert!(cost.is_finite(), "hungarian requires finite costs");
    let (r, c) = (cost.rows(), cost.cols());
    if r == 0 || c == 0 {
        return Assignment { pairs: vec![] };
    }
    let scale = cost
        .entries
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
        .max(1.0);
    let tie = scale * 1e-12 / ((r * c) as f64);
    let perturbed = Array2::from_shape_fn((r, c), |(i, j)| {
        cost.entries[[i, j]] + tie * ((i * c + j) as f64)
    });

    let transposed = r > c;
    let a = if transposed {
        perturbed.t().to_owned()
    } else {
        perturbed
    };
    let row_to_col = solve_rows_le_cols(&a);
    let mut pairs: Vec<(usize, usize)> = row_to_col
        .into_iter()
        .enumerate()
        .map(|(i, j)| if transposed { (j, i) } else { (i, j) })
        .collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

/// Shortest-augmenting-path Hungarian for `rows <= cols`, returning the
/// matched column of every row.
fn solve_rows_le_cols(a: &Array2<f64>) -> Vec<usize> {
    let n = a.nrows();
    let m = a.ncols();
    debug_assert!(n <= m);
    const INF: f64 = f64::INFINITY;
    // 1-based potentials and matching, classic formulation
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_to_col.iter().all(|&j| j != usize::MAX));
    row_to_col
}

/// Greedy assignment: repeatedly fix the globally smallest remaining entry.
/// Possibly suboptimal; ties break by (row, col).
pub fn greedy_match(cost: &CostMatrix) -> Assignment {
    assert!(cost.is_finite(), "greedy_match requires finite costs");
    let (r, c) = (cost.rows(), cost.cols());
    let want = r.min(c);
    let mut order: Vec<(usize, usize)> = (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(i1, j1), &(i2, j2)| {
        cost.entries[[i1, j1]]
            .partial_cmp(&cost.entries[[i2, j2]])
            .unwrap()
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });
    let mut row_used = vec![false; r];
    let mut col_used = vec![false; c];
    let mut pairs = Vec::with_capacity(want);
    for (i, j) in order {
        if pairs.len() == want {
            break;
        }
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    Assignment { pairs }
}

/// Score-threshold/top-k selection with no geometric suppression.
/// Cost is one sort; independent of box overlap structure. Idempotent.
pub fn query_filter(mut detections: Vec<Detection>, threshold: f64, max_keep: usize) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    detections.retain(|d| d.score >= threshold);
    detections.truncate(max_keep);
    detections
}

/// Classic per-class greedy NMS. Comparison baseline only; the end-to-end
/// path never calls this.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&x, &y| {
        detections[y]
            .score
            .partial_cmp(&detections[x].score)
            .unwrap()
            .then(x.cmp(&y))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            detections[k].class_id == detections[i].class_id
                && iou(&detections[k].bbox, &detections[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}
