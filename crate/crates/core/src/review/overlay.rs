//! Annotation overlays for visual review.
//!
//! The source image is first resized so its long side is `min(512, original)`
//! and the boxes are then drawn in overlay coordinates, so strokes are exactly
//! two pixels wide in the image the reviewer sees.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::annotate::Annotation;
use crate::geometry::BBox;
use crate::paths::{relative_path, to_portable};
use crate::{Error, Result};

pub const OVERLAY_LONG_SIDE: u32 = 512;
pub const STROKE: u32 = 2;
pub const OVERLAY_SIDECAR_SUFFIX: &str = "overlay.json";

pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5x7 bitmap glyphs, one row per byte, bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Label drawn at a box's top-left corner: class name and score to 2 dp.
pub fn label_text(a: &Annotation) -> String {
    format!("{} {:.2}", a.class_name, a.score)
}

/// Overlay size for a source size: long side `min(512, long)`, aspect kept.
pub fn overlay_size(width: u32, height: u32) -> (u32, u32) {
    let long = width.max(height);
    if long <= OVERLAY_LONG_SIDE {
        return (width, height);
    }
    let s = OVERLAY_LONG_SIDE as f64 / long as f64;
    let scale = |v: u32| ((v as f64 * s).round() as u32).max(1);
    if width >= height {
        (OVERLAY_LONG_SIDE, scale(height))
    } else {
        (scale(width), OVERLAY_LONG_SIDE)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn rect_outline(img: &mut RgbImage, x1: i64, y1: i64, x2: i64, y2: i64, c: [u8; 3]) {
    let t = STROKE as i64;
    for y in y1..=y2 {
        for x in x1..=x2 {
            if x - x1 < t || x2 - x < t || y - y1 < t || y2 - y < t {
                put(img, x, y, c);
            }
        }
    }
}

fn draw_label(img: &mut RgbImage, text: &str, x: i64, y: i64, bg: [u8; 3]) {
    let luminance = 0.299 * bg[0] as f64 + 0.587 * bg[1] as f64 + 0.114 * bg[2] as f64;
    let fg = if luminance > 140.0 { [0, 0, 0] } else { [255, 255, 255] };
    let w = text.chars().count() as i64 * (GLYPH_W as i64 + 1) + 1;
    for yy in y..y + GLYPH_H as i64 + 2 {
        for xx in x..x + w {
            put(img, xx, yy, bg);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let gx = x + 1 + i as i64 * (GLYPH_W as i64 + 1);
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    put(img, gx + col as i64, y + 1 + row as i64, fg);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub image_id: String,
    pub image: RgbImage,
    /// Overlay pixels per source pixel.
    pub scale: f64,
}

/// Resizes `image` and draws every annotation with its palette color and label.
pub fn render_overlay(image_id: &str, image: &DynamicImage, annotations: &[Annotation]) -> Result<OverlayImage> {
    if annotations.is_empty() {
        return Err(Error::InvalidArgument(format!("overlay for `{image_id}` needs at least one annotation")));
    }
    let (w, h) = (image.width(), image.height());
    let (ow, oh) = overlay_size(w, h);
    let mut img = if (ow, oh) == (w, h) { image.to_rgb8() } else { image.resize_exact(ow, oh, FilterType::Triangle).to_rgb8() };
    let scale = ow as f64 / w as f64;
    for (i, a) in annotations.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let b = a.bbox.scale(scale);
        let (x1, y1) = (b.x1.round() as i64, b.y1.round() as i64);
        let (x2, y2) = ((b.x2.round() as i64 - 1).max(x1), (b.y2.round() as i64 - 1).max(y1));
        rect_outline(&mut img, x1, y1, x2, y2, color);
        let label_h = GLYPH_H as i64 + 2;
        let ly = if y1 >= label_h { y1 - label_h } else { y1 };
        draw_label(&mut img, &label_text(a), x1, ly, color);
    }
    Ok(OverlayImage { image_id: image_id.to_string(), image: img, scale })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub class: String,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl OverlayBox {
    pub fn bbox(&self) -> BBox {
        BBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 }
    }
}

/// What an overlay shows, stored next to it for audit and replay. Box
/// coordinates are in source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    pub image_id: String,
    /// Source image, relative to the sidecar's directory.
    pub source_ref: String,
    pub width: u32,
    pub height: u32,
    pub scale: f64,
    pub boxes: Vec<OverlayBox>,
}

impl OverlaySidecar {
    /// Absolute source path given the overlay's own path.
    pub fn source_path(&self, overlay: impl AsRef<Path>) -> PathBuf {
        let dir = overlay.as_ref().parent().unwrap_or(Path::new("."));
        dir.join(&self.source_ref)
    }
}

pub fn overlay_sidecar_path(overlay: impl AsRef<Path>) -> PathBuf {
    overlay.as_ref().with_extension(OVERLAY_SIDECAR_SUFFIX)
}

pub fn read_overlay_sidecar(overlay: impl AsRef<Path>) -> Result<OverlaySidecar> {
    crate::jsonl::read_json(overlay_sidecar_path(overlay))
}

/// Renders and writes `<dir>/<image_id>.png` plus its sidecar; returns the overlay path.
pub fn write_overlay(dir: &Path, image_id: &str, source: &Path, annotations: &[Annotation]) -> Result<PathBuf> {
    let img = image::open(source).map_err(|e| Error::Image(format!("{}: {e}", source.display())))?;
    let overlay = render_overlay(image_id, &img, annotations)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{image_id}.png"));
    overlay.image.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let sidecar = OverlaySidecar {
        image_id: image_id.to_string(),
        source_ref: to_portable(&relative_path(dir, source)),
        width: overlay.image.width(),
        height: overlay.image.height(),
        scale: overlay.scale,
        boxes: annotations
            .iter()
            .map(|a| OverlayBox {
                class: a.class_name.clone(),
                score: a.score,
                x1: a.bbox.x1,
                y1: a.bbox.y1,
                x2: a.bbox.x2,
                y2: a.bbox.y2,
            })
            .collect(),
    };
    crate::jsonl::write_json(overlay_sidecar_path(&path), &sidecar)?;
    Ok(path)
}
