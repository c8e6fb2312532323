//! Synthetic shapes: circles, squares and triangles on a noise background.
//!
//! Each image holds one to three shapes with non-overlapping bounding boxes.
//! Shape centers fall in distinct 32-pixel cells so no two objects compete for
//! the same output cell. Labels are the exact extents of the painted pixels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::io::{ppm_write, write_label_file, ImageFile};
use crate::loss::TruthBox;

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

/// Side of the cell grid used to keep shape centers apart.
const CELL: usize = 32;
const MAX_SHAPES: usize = 3;
const MIN_FRACTION: f64 = 0.25;
const MAX_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn from_class(c: usize) -> Self {
        match c % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Whether the pixel center `(px, py)` lies inside a shape of size `d` at `(cx, cy)`.
    fn contains(self, cx: f64, cy: f64, d: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        let r = d / 2.0;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex at the top, base at the bottom
                let t = (dy + r) / d;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

/// Draws one image and its labels.
pub fn synth_image(rng: &mut impl Rng, size: usize) -> (ImageFile, Vec<TruthBox>) {
    let mut rgb = vec![0u8; 3 * size * size];
    for v in rgb.iter_mut() {
        *v = rng.gen_range(60..=140);
    }
    let mut img = ImageFile { width: size, height: size, rgb };
    let cells = (size / CELL).max(1);
    let want = rng.gen_range(1..=MAX_SHAPES);
    let mut used_cells: Vec<(usize, usize)> = Vec::new();
    let mut boxes: Vec<[usize; 4]> = Vec::new();
    let mut truths = Vec::new();
    let sz = size as f64;

    let mut attempts = 0;
    while truths.len() < want && attempts < 200 {
        attempts += 1;
        let class = rng.gen_range(0..SHAPE_CLASSES.len());
        let kind = ShapeKind::from_class(class);
        let d = rng.gen_range(MIN_FRACTION..MAX_FRACTION) * sz;
        let cell = (rng.gen_range(0..cells), rng.gen_range(0..cells));
        let cw = sz / cells as f64;
        let cx = (cell.1 as f64 + rng.gen_range(0.1..0.9)) * cw;
        let cy = (cell.0 as f64 + rng.gen_range(0.1..0.9)) * cw;
        if used_cells.contains(&cell)
            || cx - d / 2.0 < 1.0
            || cy - d / 2.0 < 1.0
            || cx + d / 2.0 > sz - 1.0
            || cy + d / 2.0 > sz - 1.0
        {
            continue;
        }
        let Some(ext) = extent(kind, cx, cy, d, size) else { continue };
        let apart =
            boxes.iter().all(|b| ext[2] + 2 <= b[0] || b[2] + 2 <= ext[0] || ext[3] + 2 <= b[1] || b[3] + 2 <= ext[1]);
        if !apart {
            continue;
        }
        let color = bright_color(rng);
        for y in ext[1]..ext[3] {
            for x in ext[0]..ext[2] {
                if kind.contains(cx, cy, d, x as f64 + 0.5, y as f64 + 0.5) {
                    img.put(x, y, color);
                }
            }
        }
        used_cells.push(cell);
        boxes.push(ext);
        let (x0, y0, x1, y1) = (ext[0] as f64 / sz, ext[1] as f64 / sz, ext[2] as f64 / sz, ext[3] as f64 / sz);
        truths.push(TruthBox { x: (x0 + x1) / 2.0, y: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0, class });
    }
    (img, truths)
}

/// Half-open pixel extent `[x0, y0, x1, y1]` of the painted shape.
fn extent(kind: ShapeKind, cx: f64, cy: f64, d: f64, size: usize) -> Option<[usize; 4]> {
    let mut e = [usize::MAX, usize::MAX, 0, 0];
    for y in 0..size {
        for x in 0..size {
            if kind.contains(cx, cy, d, x as f64 + 0.5, y as f64 + 0.5) {
                e[0] = e[0].min(x);
                e[1] = e[1].min(y);
                e[2] = e[2].max(x + 1);
                e[3] = e[3].max(y + 1);
            }
        }
    }
    (e[2] >= e[0] + 4 && e[3] >= e[1] + 4).then_some(e)
}

fn bright_color(rng: &mut impl Rng) -> [u8; 3] {
    let mut c = [0u8; 3];
    let hot = rng.gen_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == hot { rng.gen_range(220..=255) } else { rng.gen_range(0..=255) };
    }
    c
}

/// Writes `n` images to `out_dir/images`, labels to `out_dir/labels`, plus
/// `manifest.tsv` and `classes.txt`.
pub fn synth_dataset(n: usize, image_size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if image_size == 0 || !image_size.is_multiple_of(32) {
        return Err(Error::Config(format!("image size must be a positive multiple of 32, got {image_size}")));
    }
    let out = out_dir.as_ref();
    let (img_dir, lbl_dir) = (out.join("images"), out.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest {
        entries: Vec::with_capacity(n),
        classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    for i in 0..n {
        let (img, truths) = synth_image(&mut rng, image_size);
        let ip = img_dir.join(format!("{i:04}.ppm"));
        let lp = lbl_dir.join(format!("{i:04}.txt"));
        ppm_write(&ip, &img)?;
        write_label_file(&lp, &truths)?;
        manifest.entries.push((ip, lp));
    }
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
