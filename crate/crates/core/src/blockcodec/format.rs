//! Image file formats.
//!
//! * Binary PPM (`P6`, maxval 255). Byte `b` reads as `b / 255`; a value `v`
//!   writes as `round(v * 255)` clamped to `[0, 255]`. Always 3 channels.
//! * `IMGT` raw tensor: magic `IMGT`, `u32` version (1), `u32` h, w, c, then
//!   `h*w*c` little-endian `f32` values in row-major (row, column, channel)
//!   order. Lossless.

use std::fs;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};

pub const IMGT_MAGIC: &[u8; 4] = b"IMGT";
pub const IMGT_VERSION: u32 = 1;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn encode_ppm(x: &ImageTensor) -> Result<Vec<u8>> {
    if x.channels() != 3 {
        return Err(Error::Shape(format!(
            "PPM needs 3 channels, image has {}",
            x.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(
        x.data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(format_err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and '#' comments may separate header fields
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
            return Err(format_err(pos, "expected decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(pos, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    let n = w * h * 3;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err(bytes.len(), format!("truncated pixel data, need {n} bytes")))?;
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageTensor::new(h, w, 3, data)
}

pub fn encode_imgt(x: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * x.data().len());
    out.extend_from_slice(IMGT_MAGIC);
    for v in [
        IMGT_VERSION,
        x.height() as u32,
        x.width() as u32,
        x.channels() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_imgt(bytes: &[u8]) -> Result<ImageTensor> {
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| format_err(bytes.len(), "truncated header"))
    };
    if bytes.get(..4) != Some(IMGT_MAGIC.as_slice()) {
        return Err(format_err(0, "missing IMGT magic"));
    }
    let version = word(4)?;
    if version != IMGT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(8)? as usize, word(12)? as usize, word(16)? as usize);
    let n = h * w * c;
    let body = bytes
        .get(20..20 + 4 * n)
        .ok_or_else(|| format_err(bytes.len(), format!("truncated data, need {n} values")))?;
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data
        .iter()
        .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
    {
        return Err(format_err(20 + 4 * i, "value outside [0, 1]"));
    }
    ImageTensor::new(h, w, c, data)
}

/// Sniffs the magic bytes and decodes either format.
pub fn decode_any(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.starts_with(IMGT_MAGIC) {
        decode_imgt(bytes)
    } else {
        decode_ppm(bytes)
    }
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    decode_any(&fs::read(path)?)
}

/// Writes PPM when the extension is `.ppm`, `IMGT` otherwise.
pub fn write_image(path: &Path, x: &ImageTensor) -> Result<()> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if is_ppm {
        encode_ppm(x)?
    } else {
        encode_imgt(x)
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_bytes_round_trip() {
        let raw: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 14) as u8).collect();
        let mut file = b"P6\n# comment\n3 2\n255\n".to_vec();
        file.extend_from_slice(&raw);
        let img = decode_ppm(&file).unwrap();
        assert_eq!(img.shape(), (2, 3, 3));
        let again = encode_ppm(&img).unwrap();
        assert_eq!(&again[again.len() - raw.len()..], raw.as_slice());
    }

    #[test]
    fn ppm_quantizes_and_clamps() {
        let img = ImageTensor::new(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn ppm_errors_carry_offsets() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(Error::Format { offset: 14, .. })
        ));
        assert!(encode_ppm(&ImageTensor::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn imgt_rejects_bad_header() {
        assert!(matches!(
            decode_imgt(b"IMGX"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = encode_imgt(&ImageTensor::zeros(1, 1, 1));
        bytes[4] = 2;
        assert!(matches!(
            decode_imgt(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        let bytes = encode_imgt(&ImageTensor::zeros(2, 2, 1));
        assert!(decode_imgt(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn imgt_layout_is_fixed() {
        let img = ImageTensor::new(1, 2, 1, vec![0.25, 1.0]).unwrap();
        let bytes = encode_imgt(&img);
        let mut want = b"IMGT".to_vec();
        for v in [1u32, 1, 2, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&0.25f32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    proptest! {
        #[test]
        fn imgt_is_lossless(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u32>()) {
            let data = (0..h * w * c)
                .map(|i| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / u32::MAX as f32)
                .collect();
            let img = ImageTensor::new(h, w, c, data).unwrap();
            prop_assert_eq!(decode_any(&encode_imgt(&img)).unwrap(), img);
        }
    }
}
