//! Semantic occupancy IoU and retrieval average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u16,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    /// Mean over classes with an IoU; `None` if there are none.
    pub miou: Option<f64>,
    /// Binary occupied-vs-empty IoU over the same voxels.
    pub geometry_iou: Option<f64>,
    pub evaluated_voxels: usize,
}

/// Per-class IoU `TP / (TP + FP + FN)` over voxels that are inside `mask`
/// (when given) and whose ground-truth label is not in `ignore`.
pub fn eval_miou(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    classes: &[u16],
    ignore: &[u16],
    mask: Option<&[bool]>,
) -> Result<MiouReport> {
    if !pred.same_geometry(gt) {
        return Err(Error::invalid("prediction and ground-truth grids differ"));
    }
    let n = gt.labels.len();
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::invalid("mask size differs from grid"));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); classes.len()];
    let (mut g_tp, mut g_fp, mut g_fn) = (0usize, 0usize, 0usize);
    let mut evaluated = 0;
    for i in 0..n {
        let (p, g) = (pred.labels[i], gt.labels[i]);
        if mask.is_some_and(|m| !m[i]) || ignore.contains(&g) {
            continue;
        }
        evaluated += 1;
        match (pred.occupied(i), gt.occupied(i)) {
            (true, true) => g_tp += 1,
            (true, false) => g_fp += 1,
            (false, true) => g_fn += 1,
            _ => {}
        }
        for (c, k) in classes.iter().zip(counts.iter_mut()) {
            match (p == *c, g == *c) {
                (true, true) => k.0 += 1,
                (true, false) => k.1 += 1,
                (false, true) => k.2 += 1,
                _ => {}
            }
        }
    }
    let iou = |tp: usize, fp: usize, fn_: usize| (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
    let per_class: Vec<ClassIou> = classes
        .iter()
        .zip(counts)
        .map(|(c, (tp, fp, fn_))| ClassIou {
            class_id: *c,
            tp,
            fp,
            fn_,
            iou: iou(tp, fp, fn_),
        })
        .collect();
    let vals: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    Ok(MiouReport {
        miou: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        per_class,
        geometry_iou: iou(g_tp, g_fp, g_fn),
        evaluated_voxels: evaluated,
    })
}

/// All-point interpolated average precision. Points are ranked by
/// descending score, ties by index. `None` without positives.
pub fn average_precision(scores: &[f64], positives: &[bool], mask: Option<&[bool]>) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    let total = order.iter().filter(|&&i| positives[i]).count();
    if total == 0 {
        return None;
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    // Precision as exact (tp, rank) pairs so the interpolation compares
    // rationals; the sum is carried in double-double so hand-counted
    // fractions like 5/6 round once.
    let mut prec = Vec::with_capacity(order.len());
    let mut tp = 0u64;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
        }
        prec.push((tp, rank as u64 + 1));
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        let ((a, b), (c, d)) = (prec[k], prec[k + 1]);
        if (a as u128) * (d as u128) < (c as u128) * (b as u128) {
            prec[k] = prec[k + 1];
        }
    }
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (&i, &(n, d)) in order.iter().zip(&prec) {
        if !positives[i] {
            continue;
        }
        let (n, d) = (n as f64, d as f64);
        let q = n / d;
        let r = (-q).mul_add(d, n) / d;
        let s = hi + q;
        let bb = s - hi;
        let e = (hi - (s - bb)) + (q - bb);
        hi = s;
        lo += e + r;
    }
    let t = total as f64;
    let q = hi / t;
    let rem = (-q).mul_add(t, hi) + lo;
    Some(q + rem / t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub ap: Vec<Option<f64>>,
    pub ap_visible: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub map_visible: Option<f64>,
}

/// Mean AP over queries (`scores[q][p]`, `gt[q][p]`). Queries without
/// positives are skipped with a warning. `map_visible` restricts every
/// query to `visible` points; without a mask it equals `map`.
pub fn eval_map(scores: &[Vec<f64>], gt: &[Vec<bool>], visible: Option<&[bool]>) -> Result<MapReport> {
    if scores.len() != gt.len() {
        return Err(Error::invalid("score and ground-truth query counts differ"));
    }
    for (s, g) in scores.iter().zip(gt) {
        if s.len() != g.len() || visible.is_some_and(|v| v.len() != s.len()) {
            return Err(Error::invalid("score, ground-truth and visibility lengths differ"));
        }
        if s.iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("retrieval score is NaN"));
        }
    }
    let ap: Vec<Option<f64>> = scores.iter().zip(gt).map(|(s, g)| average_precision(s, g, None)).collect();
    let ap_visible: Vec<Option<f64>> = match visible {
        Some(v) => scores.iter().zip(gt).map(|(s, g)| average_precision(s, g, Some(v))).collect(),
        None => ap.clone(),
    };
    for (q, a) in ap.iter().enumerate() {
        if a.is_none() {
            log::warn!("query {q} has no positive points and is excluded");
        }
    }
    let mean = |v: &[Option<f64>]| {
        let x: Vec<f64> = v.iter().flatten().copied().collect();
        (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64)
    };
    Ok(MapReport {
        map: mean(&ap),
        map_visible: mean(&ap_visible),
        ap,
        ap_visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridSpec, EMPTY_LABEL};

    fn grid(labels: &[u16]) -> VoxelGrid {
        let mut g = VoxelGrid::empty(GridSpec {
            origin: [0.0; 3],
            voxel_size: 1.0,
            dims: [labels.len(), 1, 1],
        });
        g.labels = labels.to_vec();
        g
    }

    #[test]
    fn hand_counted_iou() {
        let e = EMPTY_LABEL;
        let r = eval_miou(&grid(&[1, 1, e, e]), &grid(&[1, e, 1, e]), &[1], &[], None).unwrap();
        assert_eq!(r.per_class[0].iou, Some(1.0 / 3.0));
        assert_eq!(r.miou, Some(1.0 / 3.0));
    }

    #[test]
    fn identical_and_disjoint() {
        let g = grid(&[1, 2, 3, EMPTY_LABEL]);
        let r = eval_miou(&g, &g, &[1, 2, 3, 4], &[], None).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.per_class[3].iou, None);
        let d = eval_miou(&grid(&[1, EMPTY_LABEL]), &grid(&[EMPTY_LABEL, 1]), &[1], &[], None).unwrap();
        assert_eq!(d.miou, Some(0.0));
    }

    #[test]
    fn mismatched_grids_rejected() {
        assert!(eval_miou(&grid(&[1]), &grid(&[1, 2]), &[1], &[], None).is_err());
    }

    #[test]
    fn ap_fixtures() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true], None).unwrap();
        assert_eq!(ap, 5.0 / 6.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false], None), Some(1.0));
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut pos = vec![false; n];
        pos[n - 1] = true;
        assert_eq!(average_precision(&scores, &pos, None), Some(1.0 / n as f64));
        assert_eq!(average_precision(&[0.5], &[false], None), None);
    }

    #[test]
    fn full_visibility_matches_map() {
        let s = vec![vec![0.3, 0.9, 0.1, 0.5], vec![0.2, 0.2, 0.8, 0.4]];
        let g = vec![vec![true, false, false, true], vec![false, true, true, false]];
        let r = eval_map(&s, &g, Some(&[true; 4])).unwrap();
        assert_eq!(r.map, r.map_visible);
    }
}
