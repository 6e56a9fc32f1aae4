//! Segmentation metrics: Dice overlap and symmetric Hausdorff distance.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ops::Labels;
use crate::tensor::{Real, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["BG", "RV", "MYO", "LV"];

/// Foreground classes averaged in reports.
pub const FOREGROUND: [u8; 3] = [1, 2, 3];

fn check_extents(a: &Labels, b: &Labels) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::shape(format!(
            "label extents differ: {:?} vs {:?}",
            a.extents(),
            b.extents()
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` for class `cls`; 1 when both sets are empty.
pub fn dice_score(pred: &Labels, gt: &Labels, cls: u8) -> Result<f64> {
    check_extents(pred, gt)?;
    let mut both = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == cls, g == cls);
        both += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// Mean Dice over the foreground classes.
pub fn foreground_dice(pred: &Labels, gt: &Labels) -> Result<f64> {
    let mut s = 0.0;
    for cls in FOREGROUND {
        s += dice_score(pred, gt, cls)?;
    }
    Ok(s / FOREGROUND.len() as f64)
}

/// Voxel coordinates of class `cls`.
pub fn class_voxels(labels: &Labels, cls: u8) -> Vec<[usize; 3]> {
    let [_, h, w] = labels.extents();
    labels
        .data()
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l == cls)
        .map(|(i, _)| [i / (h * w), (i / w) % h, i % w])
        .collect()
}

fn dist(a: &[usize; 3], b: &[usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Points of `set` with a 6-neighbor outside it. The nearest member of
/// `set` to any outside point is always one of these.
fn boundary(set: &HashSet<[usize; 3]>) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = set
        .iter()
        .filter(|p| {
            (0..3).any(|a| {
                let mut lo = **p;
                let mut hi = **p;
                hi[a] += 1;
                let below_outside = if p[a] == 0 {
                    true
                } else {
                    lo[a] -= 1;
                    !set.contains(&lo)
                };
                below_outside || !set.contains(&hi)
            })
        })
        .copied()
        .collect();
    out.sort_unstable();
    out
}

fn directed(from: &[[usize; 3]], to: &HashSet<[usize; 3]>, to_boundary: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for p in from {
        if to.contains(p) {
            continue;
        }
        let near = to_boundary
            .iter()
            .map(|q| dist(p, q, spacing))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(near);
    }
    worst
}

/// Symmetric Hausdorff distance between two voxel sets in millimetres.
pub fn hausdorff(pred: &[[usize; 3]], gt: &[[usize; 3]], spacing: [f64; 3]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::MetricUndefined("Hausdorff distance of an empty set".into()));
    }
    let ps: HashSet<[usize; 3]> = pred.iter().copied().collect();
    let gs: HashSet<[usize; 3]> = gt.iter().copied().collect();
    let pb = boundary(&ps);
    let gb = boundary(&gs);
    Ok(directed(pred, &gs, &gb, spacing).max(directed(gt, &ps, &pb, spacing)))
}

/// Hausdorff distance of class `cls` between two label volumes.
pub fn class_hausdorff(pred: &Labels, gt: &Labels, cls: u8, spacing: [f64; 3]) -> Result<f64> {
    check_extents(pred, gt)?;
    hausdorff(&class_voxels(pred, cls), &class_voxels(gt, cls), spacing)
}

/// Voxelwise argmax over the class axis of `(1, C, d, h, w)` logits; ties
/// go to the lower class.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<Labels> {
    let [n, c, d, h, w] = logits.dims5()?;
    if n != 1 || c > 256 {
        return Err(Error::shape(format!("cannot take argmax of {:?}", logits.shape())));
    }
    let vol = d * h * w;
    let src = logits.data();
    let data = (0..vol)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if src[k * vol + v] > src[best * vol + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Labels::new([d, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub frame_index: usize,
    pub class: u8,
    pub dice: f64,
    /// `None` when either set is empty.
    pub hausdorff_mm: Option<f64>,
}

/// Dice and Hausdorff of every foreground class of one frame.
pub fn frame_metrics(frame_index: usize, pred: &Labels, gt: &Labels, spacing: [f64; 3]) -> Result<Vec<MetricRow>> {
    FOREGROUND
        .iter()
        .map(|&cls| {
            let hausdorff_mm = match class_hausdorff(pred, gt, cls, spacing) {
                Ok(v) => Some(v),
                Err(Error::MetricUndefined(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricRow {
                frame_index,
                class: cls,
                dice: dice_score(pred, gt, cls)?,
                hausdorff_mm,
            })
        })
        .collect()
}

/// `frame_index,class,dice,hausdorff_mm`; an undefined distance is left empty.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("frame_index,class,dice,hausdorff_mm\n");
    for r in rows {
        let hd = r.hausdorff_mm.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.6},{}", r.frame_index, r.class, r.dice, hd);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_cases() {
        let gt = Labels::new([1, 1, 4], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(dice_score(&gt, &gt, 1).unwrap(), 1.0);
        let pred = Labels::new([1, 1, 4], vec![0, 1, 1, 0]).unwrap();
        assert_eq!(dice_score(&pred, &gt, 1).unwrap(), 0.5);
        let disjoint = Labels::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice_score(&disjoint, &gt, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&gt, &gt, 3).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_single_pair() {
        assert_eq!(hausdorff(&[[0, 0, 0]], &[[0, 0, 3]], [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hausdorff(&[[0, 0, 0]], &[[0, 0, 0]], [1.0; 3]).unwrap(), 0.0);
        assert!(matches!(
            hausdorff(&[], &[[0, 0, 0]], [1.0; 3]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let t = Tensor::new(vec![1, 3, 1, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn csv_leaves_missing_distance_empty() {
        let rows = vec![MetricRow {
            frame_index: 2,
            class: 1,
            dice: 1.0,
            hausdorff_mm: None,
        }];
        assert_eq!(metrics_csv(&rows), "frame_index,class,dice,hausdorff_mm\n2,1,1.000000,\n");
    }
}
