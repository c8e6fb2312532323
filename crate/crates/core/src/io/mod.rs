//! File-in/file-out boundary: binary PPM images, label files, letterbox
//! preprocessing and annotated-image rendering.

pub mod image;
pub mod labels;
pub mod ppm;
pub mod render;

pub use image::{image_to_tensor, Letterbox};
pub use labels::{parse_labels, read_label_file, write_label_file};
pub use ppm::{ppm_decode, ppm_encode, ppm_read, ppm_write, ImageFile};
pub use render::render_detections;
