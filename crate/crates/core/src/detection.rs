//! Decoding, thresholding and non-maximum suppression.

use crate::anchors::Anchor;
use crate::error::Result;
use crate::io::Letterbox;
use crate::loss::{sigmoid, GridLayout};
use crate::network::Network;
use crate::tensor::{Float, Tensor};

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    fn corners(&self) -> [f64; 4] {
        [self.x_min as f64, self.y_min as f64, self.x_max as f64, self.y_max as f64]
    }

    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

/// IoU of two `[x_min, y_min, x_max, y_max]` boxes; 0 when either has no area.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_xyxy(a.corners(), b.corners())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Objectness times class probability.
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub conf: f32,
    pub nms: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { conf: 0.25, nms: 0.45 }
    }
}

/// Turns a single-image raw output into scored boxes in `img_w × img_h` pixels.
///
/// Each slot yields at most one detection: the class maximizing
/// `σ(t_c)·σ(z_l)`, kept when that score exceeds `conf_thres`.
pub fn decode<T: Float>(
    grid: &Tensor<T>,
    anchors: &[Anchor],
    img_w: f32,
    img_h: f32,
    conf_thres: f32,
) -> Result<Vec<Detection>> {
    let lay = GridLayout::of(grid, anchors.len())?;
    let d = grid.data();
    let s = lay.grid as f64;
    let (cw, ch) = (img_w as f64 / s, img_h as f64 / s);
    let mut out = Vec::new();
    for i in 0..lay.grid {
        for j in 0..lay.grid {
            for (k, a) in anchors.iter().enumerate() {
                let v = |f: usize| d[lay.raw_index(i, j, k, f)].to_f64();
                let conf = sigmoid(v(4));
                let (mut best, mut class_id) = (f64::NEG_INFINITY, 0);
                for l in 0..lay.classes {
                    let p = conf * sigmoid(v(5 + l));
                    if p > best {
                        best = p;
                        class_id = l;
                    }
                }
                let score = best as f32;
                if score.partial_cmp(&conf_thres) != Some(std::cmp::Ordering::Greater) {
                    continue;
                }
                let bx = (j as f64 + sigmoid(v(0))) * cw;
                let by = (i as f64 + sigmoid(v(1))) * ch;
                let bw = a.w * v(2).exp() * cw;
                let bh = a.h * v(3).exp() * ch;
                let bbox = BBox::new(
                    (bx - bw / 2.0) as f32,
                    (by - bh / 2.0) as f32,
                    (bx + bw / 2.0) as f32,
                    (by + bh / 2.0) as f32,
                )
                .clip(img_w, img_h);
                out.push(Detection { bbox, class_id, score });
            }
        }
    }
    Ok(out)
}

/// Indices of `dets` sorted by descending score, ties in input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

/// Class-aware greedy suppression. Output is in descending score order.
pub fn nms(dets: &[Detection], nms_thres: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= nms_thres) {
            kept.push(d);
        }
    }
    kept
}

/// Forward pass, decode and NMS on a prepared `(1, 3, size, size)` input.
/// Boxes are in network-input pixels.
pub fn detect_tensor<T: Float>(net: &Network<T>, input: &Tensor<T>, th: &Thresholds) -> Result<Vec<Detection>> {
    let raw = net.infer(input)?;
    let size = net.config().input_size as f32;
    let dets = decode(&raw, &net.config().anchors, size, size, th.conf)?;
    Ok(nms(&dets, th.nms))
}

/// Full pipeline on an image file; boxes are in original-image pixels.
pub fn detect_image(net: &Network<f32>, img: &crate::io::ImageFile, th: &Thresholds) -> Result<Vec<Detection>> {
    let size = net.config().input_size;
    let input = crate::io::image_to_tensor(img, size);
    let dets = detect_tensor(net, &input, th)?;
    Ok(Letterbox::new(img.width, img.height, size).detections_to_original(&dets, img.width, img.height))
}

/// One `class_id score x_min y_min x_max y_max` line per detection.
pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn det(b: [f32; 4], class_id: usize, score: f32) -> Detection {
        Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), class_id, score }
    }

    /// Area by counting unit pixels on an integer lattice.
    fn pixel_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let (mut inter, mut union) = (0, 0);
        for y in -10..20 {
            for x in -10..20 {
                let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
                let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
                inter += (ina && inb) as i32;
                union += (ina || inb) as i32;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
        assert_eq!(iou(&a, &b), pixel_iou([0, 0, 2, 2], [1, 0, 3, 2]));
        let flat = BBox::new(1.0, 1.0, 1.0, 3.0);
        assert_eq!(iou(&flat, &flat), 0.0);
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_count(a in prop::array::uniform4(-5i32..10), b in prop::array::uniform4(-5i32..10)) {
            let fix = |r: [i32; 4]| [r[0].min(r[2]), r[1].min(r[3]), r[0].max(r[2]), r[1].max(r[3])];
            let (a, b) = (fix(a), fix(b));
            let f = |r: [i32; 4]| BBox::new(r[0] as f32, r[1] as f32, r[2] as f32, r[3] as f32);
            let got = iou(&f(a), &f(b));
            prop_assert!((got - pixel_iou(a, b)).abs() < 1e-12);
            prop_assert_eq!(got, iou(&f(b), &f(a)));
        }

        #[test]
        fn nms_keeps_a_separated_subset(
            raw in prop::collection::vec((0f32..50.0, 0f32..50.0, 1f32..30.0, 1f32..30.0, 0usize..2, 0f32..1.0), 0..10),
            thres in 0.1f64..0.9,
        ) {
            let dets: Vec<Detection> = raw.iter()
                .map(|&(x, y, w, h, c, s)| det([x, y, x + w, y + h], c, s))
                .collect();
            let kept = nms(&dets, thres);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.score >= b.score);
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= thres);
                    }
                }
            }
        }
    }

    #[test]
    fn nms_examples() {
        let one = [det([0.0, 0.0, 4.0, 4.0], 0, 0.7)];
        assert_eq!(nms(&one, 0.45), one.to_vec());
        let two = [det([0.0, 0.0, 4.0, 4.0], 0, 0.8), det([0.0, 0.0, 4.0, 4.0], 0, 0.9)];
        assert_eq!(nms(&two, 0.45), vec![two[1]]);
        let other_class = [det([0.0, 0.0, 4.0, 4.0], 0, 0.8), det([0.0, 0.0, 4.0, 4.0], 1, 0.9)];
        assert_eq!(nms(&other_class, 0.45).len(), 2);
    }

    fn one_hot_grid(s: usize, c: usize, cell: (usize, usize), logits: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::<f64>::new(Shape::new(1, 5 + c, s, s), 0.0).unwrap();
        for i in 0..s {
            for j in 0..s {
                t.set(0, 4, i, j, -50.0);
            }
        }
        for (f, &v) in logits.iter().enumerate() {
            t.set(0, f, cell.0, cell.1, v);
        }
        t
    }

    #[test]
    fn decode_cell_center() {
        let g = one_hot_grid(13, 2, (0, 0), &[0.0, 0.0, 0.0, 0.0, 10.0, 5.0, -5.0]);
        let d = decode(&g, &[Anchor::new(1.0, 1.0)], 416.0, 416.0, 0.25).unwrap();
        assert_eq!(d.len(), 1);
        let b = d[0].bbox;
        assert_eq!(((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0), (16.0, 16.0));
    }

    #[test]
    fn decode_score_is_product_of_sigmoids() {
        let (tc, z0, z1) = (1.3, -0.4, 0.9);
        let g = one_hot_grid(3, 2, (1, 2), &[0.2, -0.1, 0.3, -0.2, tc, z0, z1]);
        let d = decode(&g, &[Anchor::new(1.0, 1.5)], 96.0, 96.0, 0.1).unwrap();
        assert_eq!(d.len(), 1);
        let want = (1.0 / (1.0 + (-tc).exp())) * (1.0 / (1.0 + (-z1).exp()));
        assert_eq!(d[0].class_id, 1);
        assert!((d[0].score as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn decode_threshold_edges() {
        let g = Tensor::<f64>::new(Shape::new(1, 7, 4, 4), -60.0).unwrap();
        assert!(decode(&g, &[Anchor::new(1.0, 1.0)], 128.0, 128.0, 0.25).unwrap().is_empty());
        let hot = one_hot_grid(4, 2, (2, 2), &[0.0, 0.0, 0.0, 0.0, 60.0, 60.0, 0.0]);
        assert!(decode(&hot, &[Anchor::new(1.0, 1.0)], 128.0, 128.0, 1.0).unwrap().is_empty());
        assert!(decode(&hot, &[Anchor::new(1.0, 1.0), Anchor::new(2.0, 2.0)], 128.0, 128.0, 0.1).is_err());
    }

    #[test]
    fn decode_scales_with_image() {
        let g = one_hot_grid(3, 2, (1, 1), &[0.4, -0.3, -0.5, -0.2, 3.0, 2.0, 0.0]);
        let a = [Anchor::new(0.8, 0.9)];
        let small = decode(&g, &a, 90.0, 60.0, 0.1).unwrap()[0];
        let big = decode(&g, &a, 180.0, 120.0, 0.1).unwrap()[0];
        assert_eq!(small.class_id, big.class_id);
        assert!((big.bbox.x_min - 2.0 * small.bbox.x_min).abs() < 1e-4);
        assert!((big.bbox.y_max - 2.0 * small.bbox.y_max).abs() < 1e-4);
    }

    #[test]
    fn detection_lines() {
        let s = format_detections(&[det([1.0, 2.0, 3.5, 4.25], 2, 0.5)]);
        assert_eq!(s, "2 0.500000 1.000000 2.000000 3.500000 4.250000\n");
    }
}
