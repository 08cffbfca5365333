//! Binary PGM (P5), the trivially-inspectable fixture format.

use super::DataError;
use crate::warp::ImageFrame;

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageFrame, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::BadMagic);
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            if pos >= bytes.len() {
                return Err(DataError::Truncated { offset: pos });
            }
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Corrupt(format!(
                "expected integer at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| DataError::Corrupt(format!("bad integer at byte {start}")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Unsupported(format!(
            "PGM maxval {maxval} (only 8-bit supported)"
        )));
    }
    // exactly one whitespace byte before the raster
    if pos >= bytes.len() {
        return Err(DataError::Truncated { offset: pos });
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(DataError::Truncated { offset: bytes.len() });
    }
    let raster = &bytes[pos..pos + w * h];
    Ok(ImageFrame::from_fn(h, w, 1, |i, j, _| {
        raster[i * w + j] as f64 / maxval as f64
    }))
}

pub fn encode_pgm(frame: &ImageFrame) -> Result<Vec<u8>, DataError> {
    if frame.channels() != 1 {
        return Err(DataError::Unsupported(
            "PGM is grayscale only; use PNG for RGB".into(),
        ));
    }
    let clamped = frame.clamped();
    let mut out = format!("P5\n{} {}\n255\n", frame.w(), frame.h()).into_bytes();
    for i in 0..frame.h() {
        for j in 0..frame.w() {
            out.push((clamped.get(i, j, 0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_values() {
        let bytes = b"P5\n2 2\n255\n\x00\xFF\x80\x40";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.h(), img.w()), (2, 2));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(0, 1, 0), 1.0);
        assert!((img.get(1, 0, 0) - 128.0 / 255.0).abs() < 1e-12); // 0.50196
        assert!((img.get(1, 1, 0) - 64.0 / 255.0).abs() < 1e-12); // 0.25098
    }

    #[test]
    fn comments_and_whitespace_tolerated() {
        let bytes = b"P5 # a comment\n# more\n 3\t1 # cols rows\n255\n\x01\x02\x03";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.h(), img.w()), (1, 3));
    }

    #[test]
    fn sixteen_bit_rejected() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00";
        assert!(matches!(
            decode_pgm(bytes),
            Err(DataError::Unsupported(_))
        ));
    }

    #[test]
    fn truncated_raster_rejected() {
        let bytes = b"P5\n4 4\n255\n\x00\x01";
        assert!(matches!(
            decode_pgm(bytes),
            Err(DataError::Truncated { .. })
        ));
    }
}
