//! Per-class average precision and mAP.
//!
//! AP is the all-point interpolated area under the precision-recall curve:
//! every true positive adds `1/N` recall at the highest precision reached at
//! its rank or any later one. Sums are carried as exact fractions where they
//! fit, so simple cases such as `[TP, FP, TP]` over 2 truths give exactly the
//! nearest double to 5/6.

use std::fmt::Write as _;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, Zero};
use rayon::prelude::*;

use crate::detection::{detect_image, iou, score_order, BBox, Detection, Thresholds};
use crate::error::{Error, Result};
use crate::io::{ppm_read, read_label_file};
use crate::network::Network;
use crate::training::DatasetManifest;

/// Confidence threshold used when collecting detections for AP.
pub const EVAL_CONF_THRES: f32 = 0.005;
pub const EVAL_IOU_THRES: f64 = 0.5;

/// Ground-truth box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// TP flag for each detection, in input order. Detections must already be
/// sorted by descending score. Each detection claims the unmatched same-class
/// truth it overlaps most (lowest index on ties) when that overlap reaches
/// `iou_thres`.
pub fn match_detections(dets: &[Detection], truths: &[LabeledBox], iou_thres: f64) -> Vec<bool> {
    let mut used = vec![false; truths.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (t, truth) in truths.iter().enumerate() {
                if used[t] || truth.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &truth.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            match best {
                Some((t, v)) if v >= iou_thres => {
                    used[t] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision (tp, rank) at each rank, 1-based.
fn cumulative(flags: &[bool]) -> Vec<(u128, u128)> {
    let mut tp = 0u128;
    flags
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            tp += f as u128;
            (tp, r as u128 + 1)
        })
        .collect()
}

/// All-point interpolated AP of a ranked TP/FP list. `None` when there are no truths.
pub fn average_precision(flags: &[bool], num_truths: usize) -> Option<f64> {
    if num_truths == 0 {
        return None;
    }
    let cum = cumulative(flags);
    // running maximum of precision from the right, as (tp, rank)
    let mut envelope = vec![(0u128, 1u128); cum.len()];
    let mut best = (0u128, 1u128);
    for (r, &(tp, n)) in cum.iter().enumerate().rev() {
        if tp * best.1 > best.0 * n {
            best = (tp, n);
        }
        envelope[r] = best;
    }
    let exact = (|| {
        let mut acc = Ratio::<u128>::zero();
        for (r, &f) in flags.iter().enumerate() {
            if f {
                let (p, q) = envelope[r];
                acc = acc.checked_add(&Ratio::new(p, q))?;
            }
        }
        let total = acc.checked_mul(&Ratio::new(1, num_truths as u128))?;
        Some(*total.numer() as f64 / *total.denom() as f64)
    })();
    Some(exact.unwrap_or_else(|| {
        let sum: f64 = flags.iter().zip(&envelope).filter(|(f, _)| **f).map(|(_, &(p, q))| p as f64 / q as f64).sum();
        sum / num_truths as f64
    }))
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(flags: &[bool], num_truths: usize) -> Vec<(f64, f64)> {
    if num_truths == 0 {
        return Vec::new();
    }
    cumulative(flags).into_iter().map(|(tp, n)| (tp as f64 / num_truths as f64, tp as f64 / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// AP per class; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub num_truths: Vec<usize>,
    /// Mean of the defined per-class APs.
    pub map: f64,
    pub curves: Vec<Vec<(f64, f64)>>,
}

impl EvalResult {
    pub fn report(&self, class_names: &[String]) -> String {
        let mut s = String::from("class\ttruths\tAP\n");
        for (c, ap) in self.ap.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let ap = ap.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{name}\t{}\t{ap}", self.num_truths[c]);
        }
        let _ = writeln!(s, "mAP\t{:.6}", self.map);
        s
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class,truths,ap\n");
        for (c, ap) in self.ap.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let ap = ap.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(s, "{name},{},{ap}", self.num_truths[c]);
        }
        let _ = writeln!(s, "mAP,,{:.6}", self.map);
        s
    }
}

/// Aggregates per-image detections against per-image truths.
pub fn evaluate_detections(
    images: &[(Vec<Detection>, Vec<LabeledBox>)],
    num_classes: usize,
    iou_thres: f64,
) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let mut num_truths = vec![0usize; num_classes];
    // (score, flag) per class in global input order
    let mut ranked: Vec<Vec<(f32, bool)>> = vec![Vec::new(); num_classes];
    for (dets, truths) in images {
        for t in truths {
            if t.class_id >= num_classes {
                return Err(Error::Config(format!(
                    "truth class {} out of range for {num_classes} classes",
                    t.class_id
                )));
            }
            num_truths[t.class_id] += 1;
        }
        let order = score_order(dets);
        let sorted: Vec<Detection> = order.iter().map(|&i| dets[i]).collect();
        let flags = match_detections(&sorted, truths, iou_thres);
        let mut by_input = vec![false; dets.len()];
        for (k, &i) in order.iter().enumerate() {
            by_input[i] = flags[k];
        }
        for (d, f) in dets.iter().zip(by_input) {
            if d.class_id < num_classes {
                ranked[d.class_id].push((d.score, f));
            }
        }
    }
    let mut ap = Vec::with_capacity(num_classes);
    let mut curves = Vec::with_capacity(num_classes);
    for (c, list) in ranked.iter_mut().enumerate() {
        list.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = list.iter().map(|x| x.1).collect();
        ap.push(average_precision(&flags, num_truths[c]));
        curves.push(pr_curve(&flags, num_truths[c]));
    }
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(EvalResult { ap, num_truths, map, curves })
}

/// Label boxes of one image converted to pixels.
pub fn labels_to_pixels(truths: &[crate::loss::TruthBox], width: usize, height: usize) -> Vec<LabeledBox> {
    let (w, h) = (width as f64, height as f64);
    truths
        .iter()
        .map(|t| LabeledBox {
            bbox: BBox::new(
                ((t.x - t.w / 2.0) * w) as f32,
                ((t.y - t.h / 2.0) * h) as f32,
                ((t.x + t.w / 2.0) * w) as f32,
                ((t.y + t.h / 2.0) * h) as f32,
            ),
            class_id: t.class,
        })
        .collect()
}

/// Runs detection over every manifest entry and scores it at `iou_thres`.
pub fn evaluate(net: &Network<f32>, manifest: &DatasetManifest, th: &Thresholds, iou_thres: f64) -> Result<EvalResult> {
    if manifest.entries.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let images: Vec<(Vec<Detection>, Vec<LabeledBox>)> = manifest
        .entries
        .par_iter()
        .map(|(img_path, label_path)| {
            let img = ppm_read(img_path)?;
            let truths = read_label_file(label_path)?;
            let dets = detect_image(net, &img, th)?;
            Ok((dets, labels_to_pixels(&truths, img.width, img.height)))
        })
        .collect::<Result<_>>()?;
    evaluate_detections(&images, net.config().num_classes, iou_thres)
}
