use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use image::imageops::FilterType;
use image::DynamicImage;

use crate::{Error, Result};

pub type PHash = u64;

const SIDE: usize = 32;
const BLOCK: usize = 8;

fn cos_table() -> &'static [[f64; SIDE]; SIDE] {
    static TABLE: OnceLock<[[f64; SIDE]; SIDE]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; SIDE]; SIDE];
        for (k, row) in t.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = (PI / SIDE as f64 * (n as f64 + 0.5) * k as f64).cos();
            }
        }
        t
    })
}

/// Unnormalized DCT-II along rows then columns. Only the first `BLOCK + 1`
/// frequencies in each direction are computed.
fn dct_low(pixels: &[[f64; SIDE]; SIDE]) -> [[f64; BLOCK + 1]; BLOCK + 1] {
    let c = cos_table();
    let mut rows = [[0.0; BLOCK + 1]; SIDE];
    for (y, row) in pixels.iter().enumerate() {
        for k in 0..=BLOCK {
            rows[y][k] = row.iter().zip(c[k].iter()).map(|(p, w)| p * w).sum();
        }
    }
    let mut out = [[0.0; BLOCK + 1]; BLOCK + 1];
    for (ky, out_row) in out.iter_mut().enumerate() {
        for (kx, v) in out_row.iter_mut().enumerate() {
            *v = (0..SIDE).map(|y| rows[y][kx] * c[ky][y]).sum();
        }
    }
    out
}

/// 64-bit DCT perceptual hash.
///
/// Grayscale, resize to 32x32, 2D DCT, keep the 8x8 block of lowest non-DC
/// frequencies (rows and columns 1..=8), threshold at the block median.
/// Bits are packed row-major, most significant bit first.
pub fn phash(image: &DynamicImage) -> PHash {
    let gray = image.grayscale().resize_exact(SIDE as u32, SIDE as u32, FilterType::Triangle).to_luma8();
    let mut pixels = [[0.0; SIDE]; SIDE];
    for (x, y, p) in gray.enumerate_pixels() {
        pixels[y as usize][x as usize] = p.0[0] as f64;
    }
    let dct = dct_low(&pixels);
    let mut coeffs = [0.0; BLOCK * BLOCK];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            coeffs[y * BLOCK + x] = dct[y + 1][x + 1];
        }
    }
    let mut sorted = coeffs;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[BLOCK * BLOCK / 2 - 1] + sorted[BLOCK * BLOCK / 2]) / 2.0;
    coeffs.iter().enumerate().fold(0u64, |h, (i, &c)| if c > median { h | 1 << (63 - i) } else { h })
}

pub fn phash_bytes(bytes: &[u8]) -> Result<PHash> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    Ok(phash(&img))
}

pub fn phash_file(path: impl AsRef<Path>) -> Result<PHash> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(phash(&img))
}

pub fn hamming(a: PHash, b: PHash) -> u32 {
    (a ^ b).count_ones()
}
