//! Crop, scale jitter and horizontal flip, expressed as one axis-aligned
//! affine map from source pixels to output pixels.

use rand::Rng;

use crate::io::ImageFile;
use crate::loss::TruthBox;

/// Gray used where the sampling window leaves the source image.
const FILL: u8 = 128;
/// Boxes narrower than this many output pixels after clipping are dropped.
const MIN_BOX_PIXELS: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub crop: bool,
    pub scale: bool,
    pub flip: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        AugmentFlags { crop: true, scale: true, flip: true }
    }

    pub fn any(&self) -> bool {
        self.crop || self.scale || self.flip
    }
}

/// Source window `[x0, x0+win_w] × [y0, y0+win_h]` stretched onto the whole
/// output image, optionally mirrored left to right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub x0: f64,
    pub y0: f64,
    pub win_w: f64,
    pub win_h: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity(width: usize, height: usize) -> Self {
        AugmentParams { x0: 0.0, y0: 0.0, win_w: width as f64, win_h: height as f64, flip: false }
    }

    /// Output x of source x for an output of width `w`.
    pub fn map_x(&self, x: f64, w: f64) -> f64 {
        let u = (x - self.x0) * w / self.win_w;
        if self.flip {
            w - u
        } else {
            u
        }
    }

    pub fn map_y(&self, y: f64, h: f64) -> f64 {
        (y - self.y0) * h / self.win_h
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x0 + self.win_w && y >= self.y0 && y <= self.y0 + self.win_h
    }
}

/// Draws transform parameters. A crop keeps at least one truth center inside
/// the window when the image has truths; after 32 failed draws the window
/// falls back to the whole image.
pub fn sample_params(
    rng: &mut impl Rng,
    flags: &AugmentFlags,
    width: usize,
    height: usize,
    truths: &[TruthBox],
) -> AugmentParams {
    let (w, h) = (width as f64, height as f64);
    let mut p = AugmentParams::identity(width, height);
    if flags.crop || flags.scale {
        for _ in 0..32 {
            let (fx, fy) = if flags.crop { (rng.gen_range(0.75..=1.0), rng.gen_range(0.75..=1.0)) } else { (1.0, 1.0) };
            let s = if flags.scale { rng.gen_range(0.8..=1.2) } else { 1.0 };
            let (ww, wh) = (w * fx / s, h * fy / s);
            let pick = |rng: &mut dyn rand::RngCore, span: f64| {
                let (lo, hi) = if span >= 0.0 { (0.0, span) } else { (span, 0.0) };
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            };
            let cand =
                AugmentParams { x0: pick(rng, w - ww), y0: pick(rng, h - wh), win_w: ww, win_h: wh, flip: false };
            if truths.is_empty() || truths.iter().any(|t| cand.contains(t.x * w, t.y * h)) {
                p = cand;
                break;
            }
        }
    }
    if flags.flip {
        p.flip = rng.gen_bool(0.5);
    }
    p
}

/// Resamples the image (bilinear) and maps the boxes. Boxes are clipped to
/// the output and dropped when they leave it.
pub fn apply_params(img: &ImageFile, truths: &[TruthBox], p: &AugmentParams) -> (ImageFile, Vec<TruthBox>) {
    let (w, h) = (img.width, img.height);
    let identity = *p == AugmentParams::identity(w, h);
    let out_img = if identity {
        img.clone()
    } else {
        let mut out = ImageFile::new(w, h, [FILL; 3]);
        let (sx, sy) = (p.win_w / w as f64, p.win_h / h as f64);
        for oy in 0..h {
            let y = p.y0 + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..w {
                let u = if p.flip { w - 1 - ox } else { ox };
                let x = p.x0 + (u as f64 + 0.5) * sx - 0.5;
                if let Some(c) = bilinear(img, x, y) {
                    out.put(ox, oy, c);
                }
            }
        }
        out
    };
    let (wf, hf) = (w as f64, h as f64);
    let boxes = truths
        .iter()
        .filter_map(|t| {
            let (ax, bx) = (p.map_x((t.x - t.w / 2.0) * wf, wf), p.map_x((t.x + t.w / 2.0) * wf, wf));
            let x0 = ax.min(bx).clamp(0.0, wf);
            let x1 = ax.max(bx).clamp(0.0, wf);
            let y0 = p.map_y((t.y - t.h / 2.0) * hf, hf).clamp(0.0, hf);
            let y1 = p.map_y((t.y + t.h / 2.0) * hf, hf).clamp(0.0, hf);
            if x1 - x0 < MIN_BOX_PIXELS || y1 - y0 < MIN_BOX_PIXELS {
                return None;
            }
            Some(TruthBox {
                x: (x0 + x1) / 2.0 / wf,
                y: (y0 + y1) / 2.0 / hf,
                w: (x1 - x0) / wf,
                h: (y1 - y0) / hf,
                class: t.class,
            })
        })
        .collect();
    (out_img, boxes)
}

fn bilinear(img: &ImageFile, x: f64, y: f64) -> Option<[u8; 3]> {
    let (w, h) = (img.width as f64, img.height as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    let mut out = [0u8; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Some(out)
}

/// Samples parameters and applies them.
pub fn augment(
    img: &ImageFile,
    truths: &[TruthBox],
    rng: &mut impl Rng,
    flags: &AugmentFlags,
) -> (ImageFile, Vec<TruthBox>) {
    if !flags.any() {
        return (img.clone(), truths.to_vec());
    }
    let p = sample_params(rng, flags, img.width, img.height, truths);
    apply_params(img, truths, &p)
}
