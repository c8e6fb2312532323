use crate::detection::{BBox, Detection};
use crate::tensor::{Shape, Tensor};

use super::ppm::ImageFile;

/// Gray level used for letterbox padding.
pub const PAD_VALUE: f32 = 0.5;

/// Placement of an image inside a square network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub new_w: usize,
    pub new_h: usize,
    pub target: usize,
}

impl Letterbox {
    pub fn new(width: usize, height: usize, target: usize) -> Self {
        let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
        let new_w = ((width as f64 * scale).round() as usize).clamp(1, target);
        let new_h = ((height as f64 * scale).round() as usize).clamp(1, target);
        Letterbox {
            scale,
            offset_x: ((target - new_w) / 2) as f64,
            offset_y: ((target - new_h) / 2) as f64,
            new_w,
            new_h,
            target,
        }
    }

    /// Maps a box from network-input pixels back to original-image pixels,
    /// clipped to the image.
    pub fn to_original(&self, b: &BBox, width: usize, height: usize) -> BBox {
        let fx = |v: f32| ((v as f64 - self.offset_x) / self.scale).clamp(0.0, width as f64) as f32;
        let fy = |v: f32| ((v as f64 - self.offset_y) / self.scale).clamp(0.0, height as f64) as f32;
        BBox::new(fx(b.x_min), fy(b.y_min), fx(b.x_max), fy(b.y_max))
    }

    pub fn detections_to_original(&self, dets: &[Detection], width: usize, height: usize) -> Vec<Detection> {
        dets.iter().map(|d| Detection { bbox: self.to_original(&d.bbox, width, height), ..*d }).collect()
    }
}

/// Aspect-preserving bilinear resize into a `target × target` tensor of shape
/// `(1, 3, target, target)`, values in `[0, 1]`, padding filled with 0.5.
pub fn image_to_tensor(img: &ImageFile, target: usize) -> Tensor<f32> {
    let lb = Letterbox::new(img.width, img.height, target);
    let mut t = Tensor::filled(Shape::new(1, 3, target, target), PAD_VALUE);
    let plane = target * target;
    let (ox, oy) = (lb.offset_x as usize, lb.offset_y as usize);
    let sx = img.width as f64 / lb.new_w as f64;
    let sy = img.height as f64 / lb.new_h as f64;
    let data = t.data_mut();
    for dy in 0..lb.new_h {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for dx in 0..lb.new_w {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let (p00, p01, p10, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            let i = (oy + dy) * target + ox + dx;
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p01[c] as f64 * wx;
                let bot = p10[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                data[c * plane + i] = ((top * (1.0 - wy) + bot * wy) / 255.0) as f32;
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_image_at_target_size_is_pure_rescale() {
        let mut img = ImageFile::new(32, 32, [0, 0, 0]);
        img.put(3, 5, [255, 51, 102]);
        let t = image_to_tensor(&img, 32);
        assert_eq!(t.at(0, 0, 5, 3), 1.0);
        assert_eq!(t.at(0, 1, 5, 3), 0.2);
        assert_eq!(t.at(0, 2, 5, 3), 0.4);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert!(!t.data().contains(&PAD_VALUE));
    }

    #[test]
    fn wide_image_gets_quarter_bands() {
        let img = ImageFile::new(64, 32, [255, 255, 255]);
        let t = image_to_tensor(&img, 64);
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let want = if (16..48).contains(&y) { 1.0 } else { PAD_VALUE };
                    assert_eq!(t.at(0, c, y, x), want, "c{c} y{y} x{x}");
                }
            }
        }
    }

    #[test]
    fn inverse_mapping_recovers_original_box() {
        let lb = Letterbox::new(200, 100, 96);
        let orig = BBox::new(20.0, 10.0, 120.0, 90.0);
        let net = BBox::new(
            (orig.x_min as f64 * lb.scale + lb.offset_x) as f32,
            (orig.y_min as f64 * lb.scale + lb.offset_y) as f32,
            (orig.x_max as f64 * lb.scale + lb.offset_x) as f32,
            (orig.y_max as f64 * lb.scale + lb.offset_y) as f32,
        );
        let back = lb.to_original(&net, 200, 100);
        assert!((back.x_min - 20.0).abs() < 1e-3 && (back.y_max - 90.0).abs() < 1e-3);
    }
}
