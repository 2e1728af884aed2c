//! 8-bit binary PGM/PPM files and image mosaics.
//!
//! Pixel values in `[-1, 1]` map to bytes by `round((v + 1) / 2 * 255)`,
//! and bytes map back by `b / 127.5 - 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Writes a `[1, h, w]` tensor as PGM (P5) or a `[3, h, w]` tensor as PPM (P6).
pub fn write_pnm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "expected [c, h, w], got {:?}",
            image.shape()
        )));
    };
    let (magic, body) = match c {
        1 => (
            "P5",
            image
                .data()
                .iter()
                .map(|&v| to_byte(v))
                .collect::<Vec<u8>>(),
        ),
        3 => {
            let plane = h * w;
            let d = image.data();
            let body = (0..plane)
                .flat_map(|i| (0..3).map(move |ch| to_byte(d[ch * plane + i])))
                .collect();
            ("P6", body)
        }
        _ => return Err(Error::Shape(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&body);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM/PPM written by [`write_pnm`] (no comments).
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated(format!("{}: PNM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::BadMagic(format!("{}: {other:?}", path.display()))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::CorruptHeader(format!("PNM field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::CorruptHeader(format!("unsupported maxval {maxval}")));
    }
    let plane = w * h;
    let body = bytes
        .get(pos..pos + plane * channels)
        .ok_or_else(|| Error::Truncated(format!("{}: pixel data", path.display())))?;
    let mut data = vec![0.0; plane * channels];
    for i in 0..plane {
        for ch in 0..channels {
            data[ch * plane + i] = from_byte(body[i * channels + ch]);
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Tiles equally shaped `[c, h, w]` images row-major into a `rows x cols`
/// mosaic of shape `[c, rows * h, cols * w]`. Missing cells stay at -1.
pub fn mosaic(images: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("mosaic".into()))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::Shape(format!(
            "expected [c, h, w], got {:?}",
            first.shape()
        )));
    };
    if images.len() > rows * cols {
        return Err(Error::Shape(format!(
            "{} images do not fit {rows}x{cols}",
            images.len()
        )));
    }
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::filled(&[c, gh, gw], -1.0);
    for (k, img) in images.iter().enumerate() {
        img.ensure_shape(first.shape(), "mosaic tile")?;
        let (r, col) = (k / cols, k % cols);
        for ch in 0..c {
            for y in 0..h {
                let src = &img.data()[(ch * h + y) * w..][..w];
                let dst = (ch * gh + r * h + y) * gw + col * w;
                out.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}
