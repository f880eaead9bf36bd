//! Binary netpbm codecs: P6 colour images and P5 masks, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mask;

/// Class-1 threshold on mask grey levels.
pub const MASK_THRESHOLD: u8 = 128;

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    Ok(Header {
        width,
        height,
        offset: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let want = header.width * header.height * channels;
    let got = bytes.len() - header.offset;
    if got < want {
        return Err(Error::format(path, format!("truncated payload: {got} of {want} bytes")));
    }
    if got > want {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", got - want),
        ));
    }
    Ok(&bytes[header.offset..])
}

/// Decodes a P6 image into a `(3, H, W)` tensor with values `p / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &header, 3, path)?;
    let plane = header.width * header.height;
    Tensor::from_fn(&[3, header.height, header.width], |i| {
        let (c, p) = (i / plane, i % plane);
        f64::from(data[p * 3 + c]) / 255.0
    })
}

/// Encodes a `(3, H, W)` tensor; values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("encode_ppm", format!("expected (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes a P5 mask: grey level `>= 128` is class 1.
pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let header = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, &header, 1, path)?;
    Mask::new(
        header.height,
        header.width,
        data.iter().map(|&v| u8::from(v >= MASK_THRESHOLD)).collect(),
    )
}

/// Encodes a mask with class 1 as 255 and everything else as 0.
pub fn encode_pgm_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&c| if c == 1 { 255 } else { 0 }));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?, path)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_pgm_mask(&read(path)?, path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_pgm_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn white_ppm() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let t = decode_ppm(&bytes, p()).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_threshold() {
        let mut bytes = b"P5 4 1 255\n".to_vec();
        bytes.extend([0, 255, 127, 128]);
        let m = decode_pgm_mask(&bytes, p()).unwrap();
        assert_eq!(m.data, vec![0, 1, 0, 1]);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 # width\n1\n255\n".to_vec();
        bytes.extend([255, 0]);
        assert_eq!(decode_pgm_mask(&bytes, p()).unwrap().data, vec![1, 0]);
    }

    #[test]
    fn rejects_malformed() {
        let ok = |b: &[u8]| decode_ppm(b, p()).is_ok();
        assert!(!ok(b"P3\n1 1\n255\n\x00\x00\x00"));
        assert!(!ok(b"P6\n1 1\n65535\n\x00\x00\x00"));
        assert!(!ok(b"P6\n1 1\n255\n\x00\x00"));
        assert!(!ok(b"P6\n1 1\n255\n\x00\x00\x00\x00"));
        assert!(!ok(b"P6\n1 x\n255\n\x00\x00\x00"));
        assert!(!ok(b"P6\n0 1\n255\n"));
        assert!(!ok(b"P6"));
        assert!(ok(b"P6\n1 1\n255\n\x00\x00\x00"));
        assert!(decode_pgm_mask(b"P6\n1 1\n255\n\x00", p()).is_err());
    }

    #[test]
    fn encode_layout() {
        let t = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            encode_ppm(&t).unwrap(),
            b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00".to_vec()
        );
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = Mask::new(3, 2, vec![0, 1, 1, 0, 1, 1]).unwrap();
        assert_eq!(decode_pgm_mask(&encode_pgm_mask(&m), p()).unwrap(), m);
    }
}
