//! Binary PPM/PGM encoding of `[C, H, W]` images with values in `[-1, 1]`.
//!
//! A value `v` maps to the byte `round((v + 1) / 2 * 255)` after clamping to
//! `[-1, 1]`; a byte `b` decodes to `b / 255 * 2 - 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// `P6` for three channels, `P5` for one.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::dim(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(data[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PNM header".into()))?);
    }
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported")));
    }
    let body = bytes
        .get(pos..pos + c * h * w)
        .ok_or_else(|| Error::Truncated("PNM pixel data".into()))?;
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = from_byte(body[(y * w + x) * c + ch]);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Grayscale image of a boolean matrix: visible entries white.
pub fn encode_pgm_bits(rows: usize, cols: usize, bits: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            out.push(if bits(r, c) { 255 } else { 0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
    }

    #[test]
    fn quantized_roundtrip() {
        for c in [1, 3] {
            let img = Tensor::uniform(&[c, 3, 5], -1.0, 1.0, &mut RngStream::new(c as u64, 0));
            let q = img.map(|v| from_byte(to_byte(v)));
            let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
            assert!(back.bit_eq(&q));
            assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
        let bytes = encode_pnm(&Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(matches!(decode_pnm(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
    }

    #[test]
    fn header_comments_skipped() {
        let t = decode_pnm(b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(t.data(), &[-1.0, 1.0]);
    }
}
