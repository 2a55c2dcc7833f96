//! 8-bit binary PGM previews.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

/// Encode a non-negative `[H, W]` image as P5, scaled so its maximum maps
/// to 255.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 2 {
        return Err(Error::Shape(format!(
            "PGM needs [H, W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let peak = img.max_abs();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        if peak > 0.0 {
            (v.abs() / peak * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let img = Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let b = encode_pgm(&img).unwrap();
        let hdr = b"P5\n3 1\n255\n";
        assert_eq!(&b[..hdr.len()], hdr);
        assert_eq!(&b[hdr.len()..], &[0, 128, 255]);
    }

    #[test]
    fn zero_image_is_black() {
        let b = encode_pgm(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(b.ends_with(&[0, 0, 0, 0]));
    }
}
