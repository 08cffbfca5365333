//! PNG reader/writer for 8-bit grayscale and RGB, non-interlaced.
//!
//! The reader handles the full format surface those files need: chunk
//! CRCs, zlib (stored/fixed/dynamic blocks) and all five row filters.
//! The writer emits filter-0 rows inside stored deflate blocks, which any
//! conformant decoder accepts.

use super::zlib::{crc32, zlib_compress_stored, zlib_decompress};
use super::DataError;
use crate::warp::ImageFrame;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub fn decode_png(bytes: &[u8]) -> Result<ImageFrame, DataError> {
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Err(DataError::BadMagic);
    }
    let mut pos = 8usize;
    let mut header: Option<(usize, usize, usize)> = None; // w, h, channels
    let mut idat = Vec::new();
    let mut seen_end = false;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(DataError::Truncated { offset: pos });
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let ctype: [u8; 4] = bytes[pos + 4..pos + 8].try_into().unwrap();
        let name = String::from_utf8_lossy(&ctype).into_owned();
        if pos + 12 + len > bytes.len() {
            return Err(DataError::Truncated { offset: pos + 8 });
        }
        let payload = &bytes[pos + 8..pos + 8 + len];
        let stored_crc =
            u32::from_be_bytes(bytes[pos + 8 + len..pos + 12 + len].try_into().unwrap());
        let computed = crc32(&bytes[pos + 4..pos + 8 + len]);
        if stored_crc != computed {
            return Err(DataError::CrcMismatch { chunk: name });
        }
        match &ctype {
            b"IHDR" => {
                if len != 13 {
                    return Err(DataError::Corrupt("IHDR length".into()));
                }
                let w = u32::from_be_bytes(payload[0..4].try_into().unwrap()) as usize;
                let h = u32::from_be_bytes(payload[4..8].try_into().unwrap()) as usize;
                let bit_depth = payload[8];
                let color = payload[9];
                if bit_depth != 8 {
                    return Err(DataError::Unsupported(format!(
                        "bit depth {bit_depth} (only 8 supported)"
                    )));
                }
                let channels = match color {
                    0 => 1,
                    2 => 3,
                    other => {
                        return Err(DataError::Unsupported(format!("color type {other}")));
                    }
                };
                if payload[10] != 0 || payload[11] != 0 {
                    return Err(DataError::Unsupported("non-standard compression/filter".into()));
                }
                if payload[12] != 0 {
                    return Err(DataError::Unsupported("interlaced PNG".into()));
                }
                if w == 0 || h == 0 {
                    return Err(DataError::Corrupt("zero image dimension".into()));
                }
                header = Some((w, h, channels));
            }
            b"IDAT" => idat.extend_from_slice(payload),
            b"IEND" => {
                seen_end = true;
                break;
            }
            _ => {} // ancillary chunks skipped
        }
        pos += 12 + len;
    }
    let (w, h, channels) = header.ok_or(DataError::Corrupt("missing IHDR".into()))?;
    if !seen_end {
        return Err(DataError::Truncated { offset: bytes.len() });
    }
    let raw = zlib_decompress(&idat)?;
    let stride = w * channels;
    if raw.len() != h * (stride + 1) {
        return Err(DataError::Corrupt(format!(
            "decompressed size {} != expected {}",
            raw.len(),
            h * (stride + 1)
        )));
    }
    // unfilter
    let mut rows = vec![0u8; h * stride];
    for y in 0..h {
        let filter = raw[y * (stride + 1)];
        let src = &raw[y * (stride + 1) + 1..(y + 1) * (stride + 1)];
        let (prior, cur) = rows.split_at_mut(y * stride);
        let prior_row = if y > 0 { &prior[(y - 1) * stride..] } else { &[] as &[u8] };
        let cur = &mut cur[..stride];
        for x in 0..stride {
            let a = if x >= channels { cur[x - channels] } else { 0 };
            let b = if y > 0 { prior_row[x] } else { 0 };
            let c = if y > 0 && x >= channels { prior_row[x - channels] } else { 0 };
            cur[x] = match filter {
                0 => src[x],
                1 => src[x].wrapping_add(a),
                2 => src[x].wrapping_add(b),
                3 => src[x].wrapping_add((((a as u16) + (b as u16)) / 2) as u8),
                4 => src[x].wrapping_add(paeth(a, b, c)),
                other => {
                    return Err(DataError::Corrupt(format!("unknown row filter {other}")));
                }
            };
        }
    }
    Ok(ImageFrame::from_fn(h, w, channels, |i, j, ch| {
        rows[i * stride + j * channels + ch] as f64 / 255.0
    }))
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let (pa, pb, pc) = (
        (b as i16 - c as i16).abs(),
        (a as i16 - c as i16).abs(),
        (a as i16 + b as i16 - 2 * c as i16).abs(),
    );
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

pub fn encode_png(frame: &ImageFrame) -> Result<Vec<u8>, DataError> {
    let channels = frame.channels();
    let color = match channels {
        1 => 0u8,
        3 => 2u8,
        other => {
            return Err(DataError::Unsupported(format!(
                "{other}-channel PNG (1 or 3 supported)"
            )))
        }
    };
    let (h, w) = (frame.h(), frame.w());
    let clamped = frame.clamped();
    let stride = w * channels;
    let mut raw = Vec::with_capacity(h * (stride + 1));
    for i in 0..h {
        raw.push(0u8); // filter: none
        for j in 0..w {
            for ch in 0..channels {
                raw.push((clamped.get(i, j, ch) * 255.0).round() as u8);
            }
        }
    }
    let mut out = SIGNATURE.to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, color, 0, 0, 0]);
    write_chunk(&mut out, b"IHDR", &ihdr);
    write_chunk(&mut out, b"IDAT", &zlib_compress_stored(&raw));
    write_chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

fn write_chunk(out: &mut Vec<u8>, ctype: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(ctype);
    out.extend_from_slice(payload);
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixture(name: &str) -> Vec<u8> {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures")
            .join(name);
        std::fs::read(path).unwrap()
    }

    #[test]
    fn decodes_external_gray_png() {
        let img = decode_png(&fixture("gray_formula.png")).unwrap();
        assert_eq!((img.h(), img.w(), img.channels()), (48, 64, 1));
        for i in 0..48 {
            for j in 0..64 {
                let expect = ((i * 3 + j * 5) % 256) as f64 / 255.0;
                assert!((img.get(i, j, 0) - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn decodes_external_rgb_png() {
        let img = decode_png(&fixture("rgb_formula.png")).unwrap();
        assert_eq!((img.h(), img.w(), img.channels()), (32, 32, 3));
        for i in 0..32 {
            for j in 0..32 {
                let expect = [
                    ((i * 7 + j) % 256) as f64 / 255.0,
                    ((i + j * 11) % 256) as f64 / 255.0,
                    ((i * j) % 256) as f64 / 255.0,
                ];
                for ch in 0..3 {
                    assert!((img.get(i, j, ch) - expect[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corrupt_crc_names_the_chunk() {
        let err = decode_png(&fixture("gray_bad_crc.png")).unwrap_err();
        match err {
            DataError::CrcMismatch { chunk } => assert_eq!(chunk, "IDAT"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn encode_decode_roundtrip_exact() {
        let img = ImageFrame::from_fn(9, 13, 3, |i, j, ch| {
            (((i * 31 + j * 17 + ch * 97) % 256) as f64) / 255.0
        });
        let bytes = encode_png(&img).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        assert!(matches!(decode_png(b"notapng"), Err(DataError::BadMagic)));
        let good = encode_png(&ImageFrame::zeros(4, 4, 1)).unwrap();
        let err = decode_png(&good[..good.len() - 6]).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }));
    }
}
