//! Anchor priors from k-means over box shapes with the `1 - IoU` distance.
//!
//! Boxes are compared co-centered, so only `(w, h)` matters. Initialization is
//! k-means++ under the same distance. The centroid update is the per-cluster
//! coordinate mean, accepted only when it does not raise that cluster's cost;
//! together with nearest-centroid assignment this makes the total cost
//! non-increasing from one iteration to the next.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::labels::read_label_file;

/// A prior box shape in grid units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub const fn new(w: f64, h: f64) -> Self {
        Anchor { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// IoU of two co-centered boxes given by their dimensions.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `1 - IoU` between a box shape and a centroid shape.
pub fn iou_dist(b: (f64, f64), centroid: (f64, f64)) -> Result<f64> {
    if !(b.0 > 0.0 && b.1 > 0.0 && centroid.0 > 0.0 && centroid.1 > 0.0) {
        return Err(Error::Config(format!("box dimensions must be positive: {b:?} vs {centroid:?}")));
    }
    Ok(1.0 - shape_iou(b, centroid))
}

fn dist(b: (f64, f64), c: (f64, f64)) -> f64 {
    1.0 - shape_iou(b, c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// Sorted by area, ascending.
    pub anchors: Vec<Anchor>,
    pub seed: u64,
    pub iterations: usize,
    /// Mean over boxes of the best IoU with any anchor.
    pub mean_iou: f64,
    /// Total distance after each assignment step.
    pub cost_history: Vec<f64>,
}

impl AnchorSet {
    /// Anchor file text: a `# mean_iou=… seed=…` header, then `w h` per line.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("# mean_iou={:.6} seed={}\n", self.mean_iou, self.seed);
        for a in &self.anchors {
            let _ = writeln!(s, "{:.4} {:.4}", a.w, a.h);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an anchor file; `#` lines and blank lines are skipped.
pub fn load_anchor_file(path: impl AsRef<Path>) -> Result<Vec<Anchor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_anchors(&text, path)
}

pub fn parse_anchors(text: &str, path: &Path) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, i + 1, format!("bad anchor value: {e}")))?;
        match vals[..] {
            [w, h] if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() => out.push(Anchor::new(w, h)),
            _ => return Err(Error::parse(path, i + 1, "expected two positive numbers \"w h\"")),
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no anchors found", path.display())));
    }
    Ok(out)
}

fn assign(boxes: &[(f64, f64)], centroids: &[(f64, f64)], labels: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut cost = 0.0;
    for (b, l) in boxes.iter().zip(labels.iter_mut()) {
        let (best, d) = centroids
            .iter()
            .enumerate()
            .map(|(k, &c)| (k, dist(*b, c)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if best != *l {
            changed = true;
            *l = best;
        }
        cost += d;
    }
    (changed, cost)
}

/// One centroid update. Returns true if any centroid moved.
fn update(boxes: &[(f64, f64)], labels: &[usize], centroids: &mut [(f64, f64)]) -> bool {
    let k = centroids.len();
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (b, &l) in boxes.iter().zip(labels) {
        sums[l].0 += b.0;
        sums[l].1 += b.1;
        sums[l].2 += 1;
    }
    let mut moved = false;
    let mut empty = Vec::new();
    for (c, (sw, sh, n)) in sums.into_iter().enumerate() {
        if n == 0 {
            empty.push(c);
            continue;
        }
        let mean = (sw / n as f64, sh / n as f64);
        let members = boxes.iter().zip(labels).filter(|(_, &l)| l == c).map(|(b, _)| *b);
        let (old_cost, new_cost) = members.fold((0.0, 0.0), |(o, m), b| (o + dist(b, centroids[c]), m + dist(b, mean)));
        if new_cost <= old_cost && mean != centroids[c] {
            centroids[c] = mean;
            moved = true;
        }
    }
    // empty clusters restart at the box farthest from its own centroid
    for c in empty {
        let far = boxes
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (b, &l))| (i, dist(*b, centroids[l])))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        if centroids[c] != boxes[far] {
            centroids[c] = boxes[far];
            moved = true;
        }
    }
    moved
}

fn kmeans_pp_init(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![boxes[rng.gen_range(0..boxes.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| centroids.iter().map(|&c| dist(b, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..boxes.len())
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = boxes.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        };
        centroids.push(boxes[pick]);
    }
    centroids
}

/// Mean over boxes of the best shape IoU with any anchor.
pub fn mean_best_iou(boxes: &[(f64, f64)], anchors: &[Anchor]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    boxes.iter().map(|&b| anchors.iter().map(|a| shape_iou(b, (a.w, a.h))).fold(0.0, f64::max)).sum::<f64>()
        / boxes.len() as f64
}

/// Lloyd iterations under `1 - IoU`, stopping at an assignment fixpoint or after `max_iter`.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64, max_iter: usize) -> Result<AnchorSet> {
    if k == 0 {
        return Err(Error::Config("need K >= 1 anchors".into()));
    }
    if boxes.len() < k {
        return Err(Error::Config(format!("need at least K={k} boxes for clustering, got {}", boxes.len())));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0)) {
        return Err(Error::Config(format!("box dimensions must be positive, got {b:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(boxes, k, &mut rng);
    let mut labels = vec![usize::MAX; boxes.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (changed, cost) = assign(boxes, &centroids, &mut labels);
        history.push(cost);
        if (!changed && iterations > 0) || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let moved = update(boxes, &labels, &mut centroids);
        if !moved {
            break;
        }
    }
    let mut anchors: Vec<Anchor> = centroids.iter().map(|&(w, h)| Anchor::new(w, h)).collect();
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()));
    Ok(AnchorSet { mean_iou: mean_best_iou(boxes, &anchors), anchors, seed, iterations, cost_history: history })
}

/// Runs one assignment + update step from the given anchors; true if nothing changes.
pub fn is_fixpoint(boxes: &[(f64, f64)], anchors: &[Anchor]) -> bool {
    let mut centroids: Vec<(f64, f64)> = anchors.iter().map(|a| (a.w, a.h)).collect();
    let mut labels = vec![usize::MAX; boxes.len()];
    assign(boxes, &centroids, &mut labels);
    let before = labels.clone();
    update(boxes, &labels, &mut centroids);
    let (_, _) = assign(boxes, &centroids, &mut labels);
    labels == before
}

/// Box `(w, h)` in grid units from every label file (`*.txt`) in `dir`,
/// files in lexicographic order.
pub fn load_boxes_from_labels(dir: impl AsRef<Path>, grid: usize) -> Result<Vec<(f64, f64)>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no label files (*.txt) in {}", dir.display())));
    }
    let s = grid as f64;
    let mut out = Vec::new();
    for f in files {
        for t in read_label_file(&f)? {
            out.push((t.w * s, t.h * s));
        }
    }
    Ok(out)
}
