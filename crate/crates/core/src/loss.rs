//! Five-term detection loss and target assignment.
//!
//! Raw network output for one image has `K·(5+C)` channels over an `S×S`
//! grid. Channel `k·(5+C) + f` holds field `f` of anchor `k`:
//! `t_x, t_y, t_w, t_h, t_c`, then `C` class logits. Decoding:
//!
//! ```text
//! b_x = j + σ(t_x)        b_w = anchor_w · exp(t_w)       (grid units)
//! b_y = i + σ(t_y)        b_h = anchor_h · exp(t_h)
//! b_c = σ(t_c)            p_l = σ(z_l)
//! ```
//!
//! Terms, with `∇σ(v) = v(1-v)` evaluated on the post-sigmoid value:
//!
//! ```text
//! noobj  λ_noobj · ((0 - b_c)·∇σ(b_c))²                      on 1^noobj slots
//! obj    λ_obj   · ((g_c - b_c)·∇σ(b_c))²                    on 1^obj slots
//! coord  λ_coord · [((g_x-b_x)·∇σ)² + ((g_y-b_y)·∇σ)² + (g_w-b_w)² + (g_h-b_h)²]
//! class  λ_class · Σ_l −[y_l log p_l + (1-y_l) log(1-p_l)]   on 1^obj slots
//! prior  λ_prior · [((½-σ(t_x))·∇σ)² + ((½-σ(t_y))·∇σ)² + (a_w-b_w)² + (a_h-b_h)²]
//! ```
//!
//! `g_c` is the IoU between the slot's predicted box and its truth, fixed at
//! assignment time.

use crate::anchors::{shape_iou, Anchor};
use crate::detection::iou_xyxy;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Smallest probability passed to `log`.
pub const PROB_CLAMP: f64 = 1e-15;

/// Ground-truth box in normalized image coordinates (center, size).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

impl TruthBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class: usize) -> Result<Self> {
        let b = TruthBox { x, y, w, h, class };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-6;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.x)
            && unit(self.y)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.x - self.w / 2.0 >= -SLACK
            && self.x + self.w / 2.0 <= 1.0 + SLACK
            && self.y - self.h / 2.0 >= -SLACK
            && self.y + self.h / 2.0 <= 1.0 + SLACK;
        if !ok {
            return Err(Error::Config(format!(
                "box (cx={}, cy={}, w={}, h={}) is not inside the unit image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Corners in grid units for an `s×s` grid.
    fn corners(&self, s: f64) -> [f64; 4] {
        [
            (self.x - self.w / 2.0) * s,
            (self.y - self.h / 2.0) * s,
            (self.x + self.w / 2.0) * s,
            (self.y + self.h / 2.0) * s,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub noobj: f64,
    pub obj: f64,
    pub coord: f64,
    pub class: f64,
    pub prior: f64,
    /// Predicted boxes overlapping a truth by more than this are not penalized as background.
    pub iou_thres: f64,
    /// Number of images during which the prior term is active.
    pub n_prior: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { noobj: 1.0, obj: 5.0, coord: 1.0, class: 1.0, prior: 0.1, iou_thres: 0.5, n_prior: 12_800 }
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Decoded prediction for one anchor slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PredBox {
    /// Center in grid units.
    pub x: f64,
    pub y: f64,
    /// Size in grid units.
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub class_probs: Vec<f64>,
}

impl PredBox {
    fn corners(&self) -> [f64; 4] {
        [self.x - self.w / 2.0, self.y - self.h / 2.0, self.x + self.w / 2.0, self.y + self.h / 2.0]
    }
}

/// Grid geometry of a raw output tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
}

impl GridLayout {
    pub fn of<T: Float>(raw: &Tensor<T>, anchors: usize) -> Result<Self> {
        let s = raw.shape();
        if s.n != 1 || s.h != s.w || anchors == 0 || !s.c.is_multiple_of(anchors) || s.c / anchors < 6 {
            return Err(Error::Config(format!(
                "raw output {s} is not a single-image square grid of {anchors} anchors × (5 + C) channels"
            )));
        }
        Ok(GridLayout { grid: s.h, anchors, classes: s.c / anchors - 5 })
    }

    pub fn slots(&self) -> usize {
        self.grid * self.grid * self.anchors
    }

    /// Slot index of `(row i, col j, anchor k)`.
    pub fn slot(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.grid + j) * self.anchors + k
    }

    /// Flat index of field `f` of slot `(i, j, k)` in the raw tensor.
    pub fn raw_index(&self, i: usize, j: usize, k: usize, f: usize) -> usize {
        let ch = k * (5 + self.classes) + f;
        (ch * self.grid + i) * self.grid + j
    }
}

/// Decodes every slot of a single-image raw output, in `(i, j, k)` order.
pub fn decode_grid<T: Float>(raw: &Tensor<T>, anchors: &[Anchor]) -> Result<Vec<PredBox>> {
    let lay = GridLayout::of(raw, anchors.len())?;
    let d = raw.data();
    let mut out = Vec::with_capacity(lay.slots());
    for i in 0..lay.grid {
        for j in 0..lay.grid {
            for (k, a) in anchors.iter().enumerate() {
                let v = |f: usize| d[lay.raw_index(i, j, k, f)].to_f64();
                out.push(PredBox {
                    x: j as f64 + sigmoid(v(0)),
                    y: i as f64 + sigmoid(v(1)),
                    w: a.w * v(2).exp(),
                    h: a.h * v(3).exp(),
                    conf: sigmoid(v(4)),
                    class_probs: (0..lay.classes).map(|l| sigmoid(v(5 + l))).collect(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlotTarget {
    pub obj: bool,
    pub noobj: bool,
    pub prior: bool,
    pub truth: Option<usize>,
    /// Confidence target `g_c`: IoU with the matched truth, 0 otherwise.
    pub conf_target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub layout: GridLayout,
    pub slots: Vec<SlotTarget>,
}

impl Assignment {
    pub fn obj_count(&self) -> usize {
        self.slots.iter().filter(|s| s.obj).count()
    }
}

/// Responsible cell `(i, j)` and best-shape anchor for a truth.
pub fn responsible_slot(t: &TruthBox, grid: usize, anchors: &[Anchor]) -> (usize, usize, usize) {
    let s = grid as f64;
    let j = ((t.x * s).floor() as usize).min(grid - 1);
    let i = ((t.y * s).floor() as usize).min(grid - 1);
    let shape = (t.w * s, t.h * s);
    let mut best = (0, -1.0);
    for (k, a) in anchors.iter().enumerate() {
        let iou = shape_iou(shape, (a.w, a.h));
        if iou > best.1 {
            best = (k, iou);
        }
    }
    (i, j, best.0)
}

/// Decides which slots are object, background and prior-warm-up slots.
///
/// Each truth claims the slot in its own cell whose anchor shape best matches
/// it (a later truth overrides an earlier one on the same slot). Other slots
/// are background unless their predicted box overlaps some truth by more than
/// `iou_thres`. The prior indicator is set on every slot while
/// `images_seen < n_prior`.
pub fn assign_targets<T: Float>(
    truths: &[TruthBox],
    raw: &Tensor<T>,
    anchors: &[Anchor],
    w: &LossWeights,
    images_seen: usize,
) -> Result<Assignment> {
    for (idx, t) in truths.iter().enumerate() {
        t.validate().map_err(|e| Error::Config(format!("truth {idx}: {e}")))?;
    }
    let lay = GridLayout::of(raw, anchors.len())?;
    if let Some((idx, t)) = truths.iter().enumerate().find(|(_, t)| t.class >= lay.classes) {
        return Err(Error::Config(format!("truth {idx}: class {} out of range for {} classes", t.class, lay.classes)));
    }
    let preds = decode_grid(raw, anchors)?;
    let s = lay.grid as f64;
    let truth_corners: Vec<[f64; 4]> = truths.iter().map(|t| t.corners(s)).collect();
    let prior = images_seen < w.n_prior;
    let mut slots: Vec<SlotTarget> = preds
        .iter()
        .map(|p| {
            let pc = p.corners();
            let best = truth_corners.iter().map(|tc| iou_xyxy(pc, *tc)).fold(0.0, f64::max);
            SlotTarget { noobj: best <= w.iou_thres, prior, ..SlotTarget::default() }
        })
        .collect();
    for (idx, t) in truths.iter().enumerate() {
        let (i, j, k) = responsible_slot(t, lay.grid, anchors);
        let slot = lay.slot(i, j, k);
        slots[slot] = SlotTarget {
            obj: true,
            noobj: false,
            prior,
            truth: Some(idx),
            conf_target: iou_xyxy(preds[slot].corners(), truth_corners[idx]),
        };
    }
    Ok(Assignment { layout: lay, slots })
}

/// Per-term loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub noobj: f64,
    pub obj: f64,
    pub coord: f64,
    pub class: f64,
    pub prior: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.noobj + self.obj + self.coord + self.class + self.prior
    }

    pub fn add(&mut self, o: &LossParts) {
        self.noobj += o.noobj;
        self.obj += o.obj;
        self.coord += o.coord;
        self.class += o.class;
        self.prior += o.prior;
    }

    pub fn scale(&mut self, s: f64) {
        self.noobj *= s;
        self.obj *= s;
        self.coord *= s;
        self.class *= s;
        self.prior *= s;
    }
}

/// Which gradient accompanies the loss value.
///
/// The sigmoid-scaled residuals `((g - σ)·σ')²` also vanish as `σ` saturates,
/// so their exact derivative points towards `σ = 0` for any slot whose
/// confidence falls below about a third of the way to its target. `Delta`
/// instead differentiates the plain squared residual `(g - σ)²`; its
/// derivative in the logit is `-2·(g - σ)·σ'`, twice the scaled residual, and
/// always points at the target. Terms without a sigmoid are the same in both
/// modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Exact derivative of the reported loss value.
    Exact,
    /// Derivative of the residuals without the sigmoid scaling.
    Delta,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T = f32> {
    pub total: f64,
    pub parts: LossParts,
    /// Gradient with respect to the raw output; the exact gradient of `total`
    /// under [`GradMode::Exact`].
    pub grad: Tensor<T>,
}

/// `((g - σ(t))·σ'(t))²` and its derivative in `t` under `mode`.
#[inline]
fn scaled_sq(target: f64, t: f64, mode: GradMode) -> (f64, f64) {
    let b = sigmoid(t);
    let d = b * (1.0 - b);
    let r = (target - b) * d;
    let g = match mode {
        GradMode::Exact => 2.0 * r * d * ((target - b) * (1.0 - 2.0 * b) - d),
        GradMode::Delta => -2.0 * r,
    };
    (r * r, g)
}

/// `(target - a·e^t)²` and its derivative in `t`.
#[inline]
fn size_sq(target: f64, anchor: f64, t: f64) -> (f64, f64) {
    let b = anchor * t.exp();
    let r = target - b;
    (r * r, -2.0 * r * b)
}

/// Binary cross-entropy of `σ(z)` against `y ∈ {0, 1}` and its derivative in `z`.
#[inline]
fn bce(y: f64, z: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let v = if y > 0.5 { -p.max(PROB_CLAMP).ln() } else { -(1.0 - p).max(PROB_CLAMP).ln() };
    (v, p - y)
}

/// Loss value, per-term breakdown and exact gradient for one image.
pub fn compute_loss<T: Float>(
    raw: &Tensor<T>,
    truths: &[TruthBox],
    assignment: &Assignment,
    anchors: &[Anchor],
    w: &LossWeights,
) -> Result<LossOutput<T>> {
    compute_loss_with(raw, truths, assignment, anchors, w, GradMode::Exact)
}

/// [`compute_loss`] with a choice of gradient.
pub fn compute_loss_with<T: Float>(
    raw: &Tensor<T>,
    truths: &[TruthBox],
    assignment: &Assignment,
    anchors: &[Anchor],
    w: &LossWeights,
    mode: GradMode,
) -> Result<LossOutput<T>> {
    let lay = GridLayout::of(raw, anchors.len())?;
    if lay != assignment.layout || assignment.slots.len() != lay.slots() {
        return Err(Error::Config(format!(
            "assignment for {:?} does not match raw output {:?}",
            assignment.layout, lay
        )));
    }
    let d = raw.data();
    let mut grad = vec![0f64; d.len()];
    let mut parts = LossParts::default();
    let s = lay.grid as f64;
    for i in 0..lay.grid {
        for j in 0..lay.grid {
            for (k, a) in anchors.iter().enumerate() {
                let st = &assignment.slots[lay.slot(i, j, k)];
                let idx = |f: usize| lay.raw_index(i, j, k, f);
                let t = |f: usize| d[idx(f)].to_f64();

                if st.noobj {
                    let (v, g) = scaled_sq(0.0, t(4), mode);
                    parts.noobj += w.noobj * v;
                    grad[idx(4)] += w.noobj * g;
                }

                if st.obj {
                    let tb = truths
                        .get(st.truth.ok_or_else(|| Error::Config("object slot without a truth".into()))?)
                        .ok_or_else(|| Error::Config("assignment refers to a missing truth".into()))?;
                    let (v, g) = scaled_sq(st.conf_target, t(4), mode);
                    parts.obj += w.obj * v;
                    grad[idx(4)] += w.obj * g;

                    let (vx, gx) = scaled_sq(tb.x * s - j as f64, t(0), mode);
                    let (vy, gy) = scaled_sq(tb.y * s - i as f64, t(1), mode);
                    let (vw, gw) = size_sq(tb.w * s, a.w, t(2));
                    let (vh, gh) = size_sq(tb.h * s, a.h, t(3));
                    parts.coord += w.coord * (vx + vy + vw + vh);
                    grad[idx(0)] += w.coord * gx;
                    grad[idx(1)] += w.coord * gy;
                    grad[idx(2)] += w.coord * gw;
                    grad[idx(3)] += w.coord * gh;

                    for l in 0..lay.classes {
                        let y = if l == tb.class { 1.0 } else { 0.0 };
                        let (v, g) = bce(y, t(5 + l));
                        parts.class += w.class * v;
                        grad[idx(5 + l)] += w.class * g;
                    }
                }

                if st.prior {
                    let (vx, gx) = scaled_sq(0.5, t(0), mode);
                    let (vy, gy) = scaled_sq(0.5, t(1), mode);
                    let (vw, gw) = size_sq(a.w, a.w, t(2));
                    let (vh, gh) = size_sq(a.h, a.h, t(3));
                    parts.prior += w.prior * (vx + vy + vw + vh);
                    grad[idx(0)] += w.prior * gx;
                    grad[idx(1)] += w.prior * gy;
                    grad[idx(2)] += w.prior * gw;
                    grad[idx(3)] += w.prior * gh;
                }
            }
        }
    }
    Ok(LossOutput {
        total: parts.total(),
        parts,
        grad: Tensor::from_vec(raw.shape(), grad.into_iter().map(T::from_f64).collect())?,
    })
}

/// Prior warm-up term alone, weighted by `λ_prior`; zero once `images_seen >= n_prior`.
pub fn prior_term<T: Float>(raw: &Tensor<T>, anchors: &[Anchor], w: &LossWeights, images_seen: usize) -> Result<f64> {
    if images_seen >= w.n_prior {
        return Ok(0.0);
    }
    let lay = GridLayout::of(raw, anchors.len())?;
    let d = raw.data();
    let mut sum = 0.0;
    for i in 0..lay.grid {
        for j in 0..lay.grid {
            for (k, a) in anchors.iter().enumerate() {
                let t = |f: usize| d[lay.raw_index(i, j, k, f)].to_f64();
                sum += scaled_sq(0.5, t(0), GradMode::Exact).0
                    + scaled_sq(0.5, t(1), GradMode::Exact).0
                    + size_sq(a.w, a.w, t(2)).0
                    + size_sq(a.h, a.h, t(3)).0;
            }
        }
    }
    Ok(w.prior * sum)
}

/// Mean loss over a batch and the exact gradient of that mean. Image `b` of
/// the batch counts as having been preceded by `images_seen + b` images.
pub fn batch_loss<T: Float>(
    raw: &Tensor<T>,
    truths: &[Vec<TruthBox>],
    anchors: &[Anchor],
    w: &LossWeights,
    images_seen: usize,
) -> Result<LossOutput<T>> {
    batch_loss_with(raw, truths, anchors, w, images_seen, GradMode::Exact)
}

/// [`batch_loss`] with a choice of gradient.
pub fn batch_loss_with<T: Float>(
    raw: &Tensor<T>,
    truths: &[Vec<TruthBox>],
    anchors: &[Anchor],
    w: &LossWeights,
    images_seen: usize,
    mode: GradMode,
) -> Result<LossOutput<T>> {
    let n = raw.shape().n;
    if truths.len() != n {
        return Err(Error::Config(format!("batch of {n} outputs but {} truth lists", truths.len())));
    }
    let mut parts = LossParts::default();
    let mut grads = Vec::with_capacity(n);
    let inv = 1.0 / n as f64;
    for (b, t) in truths.iter().enumerate() {
        let item = raw.batch_slice(b, 1)?;
        let a = assign_targets(t, &item, anchors, w, images_seen + b)?;
        let out = compute_loss_with(&item, t, &a, anchors, w, mode)?;
        parts.add(&out.parts);
        grads.push(out.grad.scale(T::from_f64(inv)));
    }
    parts.scale(inv);
    Ok(LossOutput { total: parts.total(), parts, grad: Tensor::stack(&grads)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn raw_zeros(s: usize, k: usize, c: usize) -> Tensor<f64> {
        Tensor::zeros(Shape::new(1, k * (5 + c), s, s)).unwrap()
    }

    #[test]
    fn no_truths_means_all_background() {
        let raw = raw_zeros(3, 2, 2);
        let a = assign_targets(&[], &raw, &[Anchor::new(1.0, 1.0), Anchor::new(2.0, 2.0)], &LossWeights::default(), 0)
            .unwrap();
        assert!(a.slots.iter().all(|s| s.noobj && !s.obj));
    }

    #[test]
    fn responsible_anchor_is_best_shape_match() {
        let anchors = [Anchor::new(1.0, 1.0), Anchor::new(3.0, 3.0)];
        let s = 13;
        let c = 6.5 / 13.0;
        let t = TruthBox::new(c, c, 3.0 / 13.0, 3.0 / 13.0, 0).unwrap();
        assert_eq!(responsible_slot(&t, s, &anchors), (6, 6, 1));
        let raw = raw_zeros(s, 2, 1);
        let a = assign_targets(&[t], &raw, &anchors, &LossWeights::default(), 0).unwrap();
        let slot = a.layout.slot(6, 6, 1);
        assert!(a.slots[slot].obj && a.slots[slot].truth == Some(0));
        assert_eq!(a.obj_count(), 1);
    }

    #[test]
    fn obj_and_noobj_are_exclusive() {
        let anchors = [Anchor::new(0.5, 0.5), Anchor::new(1.5, 1.0)];
        let raw = raw_zeros(2, 2, 2);
        let truths = [TruthBox::new(0.25, 0.25, 0.4, 0.4, 0).unwrap(), TruthBox::new(0.75, 0.7, 0.3, 0.5, 1).unwrap()];
        let a = assign_targets(&truths, &raw, &anchors, &LossWeights::default(), 0).unwrap();
        assert_eq!(a.obj_count(), 2);
        assert!(a.slots.iter().all(|s| !(s.obj && s.noobj)));
    }

    #[test]
    fn rejects_out_of_range_truths() {
        let raw = raw_zeros(2, 1, 2);
        let bad = TruthBox { x: 1.2, y: 0.5, w: 0.1, h: 0.1, class: 0 };
        let e = assign_targets(
            &[TruthBox::new(0.5, 0.5, 0.2, 0.2, 0).unwrap(), bad],
            &raw,
            &[Anchor::new(1.0, 1.0)],
            &LossWeights::default(),
            0,
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("truth 1"), "{e}");
        let bad_class = TruthBox::new(0.5, 0.5, 0.2, 0.2, 5).unwrap();
        assert!(assign_targets(&[bad_class], &raw, &[Anchor::new(1.0, 1.0)], &LossWeights::default(), 0).is_err());
    }

    #[test]
    fn empty_image_with_zero_confidence_has_zero_loss() {
        let mut raw = raw_zeros(2, 1, 2);
        let lay = GridLayout::of(&raw, 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                raw.data_mut()[lay.raw_index(i, j, 0, 4)] = -800.0;
            }
        }
        let anchors = [Anchor::new(1.0, 1.0)];
        let w = LossWeights { n_prior: 0, ..LossWeights::default() };
        let a = assign_targets(&[], &raw, &anchors, &w, 0).unwrap();
        assert_eq!(compute_loss(&raw, &[], &a, &anchors, &w).unwrap().total, 0.0);
    }

    #[test]
    fn prior_term_examples() {
        let anchors = [Anchor::new(1.0, 2.0)];
        let raw = raw_zeros(1, 1, 1);
        let w = LossWeights::default();
        assert_eq!(prior_term(&raw, &anchors, &w, 0).unwrap(), 0.0);
        assert_eq!(prior_term(&raw, &anchors, &w, w.n_prior).unwrap(), 0.0);

        // offset 0.6 against the 0.5 prior, sizes at the anchor
        let mut raw = raw_zeros(1, 1, 1);
        raw.data_mut()[0] = (0.6f64 / 0.4).ln();
        let got = prior_term(&raw, &anchors, &LossWeights { prior: 1.0, ..w }, 0).unwrap();
        let want = (0.1f64 * 0.6 * 0.4).powi(2);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");

        let mut moved = raw_zeros(1, 1, 1);
        moved.data_mut()[3] = 1.0;
        assert!(prior_term(&moved, &anchors, &w, w.n_prior - 1).unwrap() > 0.0);
        assert_eq!(prior_term(&moved, &anchors, &w, w.n_prior).unwrap(), 0.0);
    }

    #[test]
    fn class_term_survives_zero_probability() {
        let (v, g) = bce(1.0, -1e4);
        assert!(v.is_finite() && (v - (-PROB_CLAMP.ln())).abs() < 1e-9);
        assert!((g + 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_class_weight_raises_loss() {
        let anchors = [Anchor::new(1.0, 1.0)];
        let raw = raw_zeros(2, 1, 2);
        let truths = [TruthBox::new(0.3, 0.3, 0.4, 0.4, 1).unwrap()];
        let base = LossWeights::default();
        let a = assign_targets(&truths, &raw, &anchors, &base, 0).unwrap();
        let l1 = compute_loss(&raw, &truths, &a, &anchors, &base).unwrap().total;
        let l2 = compute_loss(&raw, &truths, &a, &anchors, &LossWeights { class: 2.0, ..base }).unwrap().total;
        assert!(l2 > l1);
    }

    #[test]
    fn delta_mode_keeps_value_and_unscales_sigmoid_terms() {
        let anchors = [Anchor::new(0.9, 0.7)];
        let mut raw = raw_zeros(2, 1, 2);
        for (n, v) in raw.data_mut().iter_mut().enumerate() {
            *v = ((n * 37 % 11) as f64 - 5.0) / 4.0;
        }
        let truths = [TruthBox::new(0.3, 0.6, 0.35, 0.3, 0).unwrap()];
        let w = LossWeights::default();
        let a = assign_targets(&truths, &raw, &anchors, &w, 0).unwrap();
        let exact = compute_loss(&raw, &truths, &a, &anchors, &w).unwrap();
        let delta = compute_loss_with(&raw, &truths, &a, &anchors, &w, GradMode::Delta).unwrap();
        assert_eq!(exact.total, delta.total);

        let lay = a.layout;
        for i in 0..2 {
            for j in 0..2 {
                let st = &a.slots[lay.slot(i, j, 0)];
                let at = |f: usize| lay.raw_index(i, j, 0, f);
                let b = sigmoid(raw.data()[at(4)]);
                let mut want = 0.0;
                if st.noobj {
                    want += w.noobj * 2.0 * (b - 0.0) * b * (1.0 - b);
                }
                if st.obj {
                    want += w.obj * 2.0 * (b - st.conf_target) * b * (1.0 - b);
                    // size and class entries carry no sigmoid scaling
                    for f in [2, 3, 5, 6] {
                        assert_eq!(delta.grad.data()[at(f)], exact.grad.data()[at(f)]);
                    }
                }
                assert!((delta.grad.data()[at(4)] - want).abs() < 1e-14);
            }
        }
    }
}
