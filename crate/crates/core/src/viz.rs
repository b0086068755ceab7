//! 8-bit binary PGM output for masks and predictions.

use std::path::Path;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `P5` image with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(shape_err(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// Grey levels `round(255 * m)` of the first map of an `N x 1 x H x W` (or
/// `H x W`) tensor with values in `[0, 1]`.
pub fn mask_pixels(m: &Tensor) -> (usize, usize, Vec<u8>) {
    let s = m.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let px = m.data()[..h * w]
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    (w, h, px)
}

/// Class indices spread over the grey range: `c * 255 / (K - 1)` with
/// integer division, so three classes map to 0, 127 and 255.
pub fn class_pixels(classes: &[u8], num_classes: usize) -> Vec<u8> {
    let top = num_classes.saturating_sub(1).max(1);
    classes.iter().map(|&c| (c as usize * 255 / top) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        let b = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(b.len(), 11 + 6);
    }

    #[test]
    fn half_rounds_up() {
        let (w, h, px) = mask_pixels(&Tensor::full(&[1, 1, 2, 3], 0.5));
        assert_eq!((w, h), (3, 2));
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn three_class_levels() {
        assert_eq!(class_pixels(&[0, 1, 2], 3), vec![0, 127, 255]);
    }
}
