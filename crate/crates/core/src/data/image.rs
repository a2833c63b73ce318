//! 8-bit binary PGM (P5) and IAGT image files, bilinear resizing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

/// `[0, 255] → [-1, 1]`.
pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// `[-1, 1] → [0, 255]`, rounded to nearest, clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format { offset: 0, detail: "missing P5 magic".into() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                detail: format!("expected header field {} (width, height, maxval)", i + 1),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format { offset: start, detail: "header number out of range".into() })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format { offset: pos, detail: format!("unsupported maxval {maxval}, only 255") });
    }
    if width == 0 || height == 0 {
        return Err(Error::Format { offset: pos, detail: "zero image dimension".into() });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format { offset: pos, detail: "expected whitespace after maxval".into() });
    }
    Ok(Header { width, height, data_offset: pos + 1 })
}

/// Decodes a P5 file into `[1, H, W]` in [-1, 1].
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let need = h.width * h.height;
    let payload = &bytes[h.data_offset..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("pixel data truncated: {} of {need} bytes", payload.len()),
        });
    }
    Tensor::new(vec![1, h.height, h.width], payload[..need].iter().map(|&b| from_byte(b)).collect())
}

/// Encodes a `[1, H, W]` (or `[H, W]`) image.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(image)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        other => Err(Error::dim("image", format!("expected [1,H,W], got {other:?}"))),
    }
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Tensor::new(vec![1, h, w], image.data().to_vec());
    }
    let src = image.data();
    let at = |y: usize, x: usize| src[y * w + x];
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![1, out_h, out_w], data)
}

/// Loads a PGM or IAGT image as `[1, S, S]`, resizing when `size` is given.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(io::MAGIC) {
        let t = io::decode(&bytes)?;
        let (h, w) = image_dims(&t)?;
        Tensor::new(vec![1, h, w], t.into_data())?
    } else {
        decode_pgm(&bytes)?
    };
    match size {
        Some(s) => resize_bilinear(&img, s, s),
        None => Ok(img),
    }
}

/// Saves as PGM, or as IAGT when the extension is `.iagt`.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "iagt") {
        return io::save(image, path);
    }
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

/// Tiles `[N,1,S,S]` images into a `cols`-wide grid with 1-pixel borders.
pub fn mosaic(batch: &Tensor, cols: usize) -> Result<Tensor> {
    let sh = batch.shape();
    if sh.len() != 4 || sh[1] != 1 || cols == 0 {
        return Err(Error::dim("mosaic", format!("batch {sh:?}")));
    }
    let (n, h, w) = (sh[0], sh[2], sh[3]);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut data = vec![1.0; gh * gw];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let dst = (r * (h + 1) + 1 + y) * gw + c * (w + 1) + 1;
            data[dst..dst + w].copy_from_slice(&batch.data()[(i * h + y) * w..(i * h + y + 1) * w]);
        }
    }
    Tensor::new(vec![1, gh, gw], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_pixel_map() {
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
        assert!((from_byte(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn roundtrip_within_quantisation() {
        let data: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * (i as f64 * 0.37).fract()).collect();
        let img = Tensor::new(vec![1, 8, 8], data).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
    }

    #[test]
    fn constant_resize_stays_constant() {
        let img = Tensor::full(&[1, 64, 64], 0.3);
        let small = resize_bilinear(&img, 32, 32).unwrap();
        assert_eq!(small.shape(), &[1, 32, 32]);
        assert!(small.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn malformed_headers_report_offsets() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0"), Err(Error::Format { offset: 0, .. })));
        match decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0") {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("maxval")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pgm(b"P5\n2 x"), Err(Error::Format { offset: 5, .. })));
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn header_comments_accepted() {
        let img = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data(), &[-1.0, 1.0]);
    }
}
