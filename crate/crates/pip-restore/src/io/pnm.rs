//! Binary PPM (P6) and PGM (P5) image files.
//!
//! Only the 8-bit binary variants with maxval 255 are supported. Values map
//! between bytes and `[0,1]` floats by `v/255` on read and
//! `round(clamp(v)·255)` on write, so a write-then-read round trip of an
//! already-quantized image is bit-exact. Header comments (`#` to end of
//! line) are tolerated anywhere whitespace is allowed.

use std::path::Path;

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Encode a `[3,H,W]` image as binary PPM bytes.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape(
            "encode_ppm",
            format!("expected [3,H,W], got {:?}", img.shape()),
        ));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(img.data()[c * plane + i]));
        }
    }
    Ok(out)
}

/// Encode a `[1,H,W]` image as binary PGM bytes.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    if img.shape().len() != 3 || img.shape()[0] != 1 {
        return Err(Error::shape(
            "encode_pgm",
            format!("expected [1,H,W], got {:?}", img.shape()),
        ));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decode binary PPM bytes into a `[3,H,W]` image in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, payload) = decode_header(bytes, b"P6", "")?;
    let plane = h * w;
    if payload.len() < 3 * plane {
        return Err(fmt_err("", format!("P6 payload truncated: {} of {} bytes", payload.len(), 3 * plane)));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = payload[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Decode binary PGM bytes into a `[1,H,W]` image in `[0,1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, payload) = decode_header(bytes, b"P5", "")?;
    let plane = h * w;
    if payload.len() < plane {
        return Err(fmt_err("", format!("P5 payload truncated: {} of {plane} bytes", payload.len())));
    }
    let data = payload[..plane].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Read a PPM file.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| at_path(e, path))
}

/// Write a `[3,H,W]` image as a PPM file.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Read a PGM file.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| at_path(e, path))
}

/// Write a `[1,H,W]` image as a PGM file.
pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn fmt_err(path: &str, detail: String) -> Error {
    Error::Format { path: path.to_string(), detail }
}

fn at_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { detail, .. } => Error::Format { path: path.display().to_string(), detail },
        other => other,
    }
}

/// Parse `magic width height maxval` with comment/whitespace tolerance;
/// returns `(w, h, payload)` where payload starts right after the single
/// whitespace byte that terminates the maxval token.
fn decode_header<'a>(bytes: &'a [u8], magic: &[u8], path: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let seen = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(fmt_err(
            path,
            format!("expected {} magic, found {seen:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        *f = next_int(bytes, &mut pos, path)?;
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, "missing whitespace after maxval".into()));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fmt_err(path, format!("only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(fmt_err(path, format!("degenerate dimensions {w}×{h}")));
    }
    Ok((w, h, &bytes[pos..]))
}

/// Read the next decimal token, skipping whitespace and `#` comments.
fn next_int(bytes: &[u8], pos: &mut usize, path: &str) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(fmt_err(path, "header ended before all fields were read".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, "unparseable header field".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::synth_clean;

    #[test]
    fn white_pixel_encodes_to_the_exact_byte_sequence() {
        let img = Tensor::full(vec![3, 1, 1], 1.0f32);
        assert_eq!(encode_ppm(&img).unwrap(), b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn quantized_round_trip_is_bit_exact() {
        let img = synth_clean(44, 16, 24).unwrap();
        let once = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        let twice = decode_ppm(&encode_ppm(&once).unwrap()).unwrap();
        assert_eq!(once.data(), twice.data());
        assert_eq!(once.shape(), &[3, 16, 24]);
        // The first pass loses at most half a quantization step per value.
        for (a, b) in img.data().iter().zip(once.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn header_comments_and_odd_whitespace_are_tolerated() {
        let mut bytes = b"P6 # a comment\n# another\n 2\t1 # dims\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[1], 1.0);
    }

    #[test]
    fn ascii_variant_is_rejected_with_a_p6_hint() {
        let err = decode_ppm(b"P3\n1 1\n255\n0 0 0").unwrap_err();
        assert!(err.to_string().contains("P6"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[9; 5]);
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn bad_maxval_is_rejected() {
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn pgm_round_trips_grayscale() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 64.0 / 255.0, 128.0 / 255.0]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(&bytes[..], b"P5\n2 2\n255\n\x00\xff\x40\x80");
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = std::env::temp_dir().join("pip-pnm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ppm");
        let img = decode_ppm(&encode_ppm(&synth_clean(45, 8, 8).unwrap()).unwrap()).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), img.data());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn wrong_channel_count_is_rejected_on_encode() {
        assert!(encode_ppm(&Tensor::<f32>::zeros(vec![1, 4, 4])).is_err());
        assert!(encode_pgm(&Tensor::<f32>::zeros(vec![3, 4, 4])).is_err());
    }
}
