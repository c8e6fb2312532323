use crate::detection::Detection;

use super::ppm::ImageFile;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn class_color(class_id: usize) -> [u8; 3] {
    // Fibonacci hashing spreads neighbouring ids over the palette
    let h = (class_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    PALETTE[(h >> 61) as usize]
}

/// Pixel rectangle covered by a 2-pixel outline of `d`, as inclusive bounds
/// clipped to the image; `None` if the box lies outside.
pub fn outline_bounds(d: &Detection, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let b = &d.bbox;
    let x0 = b.x_min.floor().max(0.0) as usize;
    let y0 = b.y_min.floor().max(0.0) as usize;
    let x1 = (b.x_max.ceil() as isize - 1).min(width as isize - 1);
    let y1 = (b.y_max.ceil() as isize - 1).min(height as isize - 1);
    if x1 < 0 || y1 < 0 || x0 as isize > x1 || y0 as isize > y1 {
        return None;
    }
    Some((x0, y0, x1 as usize, y1 as usize))
}

/// Draws each detection as a 2-pixel rectangle outline in its class color.
pub fn render_detections(img: &ImageFile, dets: &[Detection]) -> ImageFile {
    let mut out = img.clone();
    for d in dets {
        let Some((x0, y0, x1, y1)) = outline_bounds(d, img.width, img.height) else {
            continue;
        };
        let color = class_color(d.class_id);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let on_edge = x < x0 + 2 || x + 2 > x1 || y < y0 + 2 || y + 2 > y1;
                if on_edge {
                    out.put(x, y, color);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn det(b: BBox) -> Detection {
        Detection { bbox: b, class_id: 1, score: 0.9 }
    }

    #[test]
    fn no_detections_leaves_image_unchanged() {
        let img = ImageFile::new(10, 8, [7, 8, 9]);
        assert_eq!(render_detections(&img, &[]), img);
    }

    #[test]
    fn only_outline_pixels_change() {
        let img = ImageFile::new(20, 20, [0, 0, 0]);
        let out = render_detections(&img, &[det(BBox::new(4.0, 5.0, 14.0, 15.0))]);
        let color = class_color(1);
        for y in 0..20 {
            for x in 0..20 {
                let inside = (4..=13).contains(&x) && (5..=14).contains(&y);
                let interior = (6..=11).contains(&x) && (7..=12).contains(&y);
                let want = if inside && !interior { color } else { [0, 0, 0] };
                assert_eq!(out.pixel(x, y), want, "x{x} y{y}");
            }
        }
        assert_eq!(render_detections(&img, &[det(BBox::new(4.0, 5.0, 14.0, 15.0))]), out);
    }
}
