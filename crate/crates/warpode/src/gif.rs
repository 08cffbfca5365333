//! GIF89a writer: global palette, LZW-compressed frames, infinite loop.
//!
//! Grayscale input uses the identity 256-gray palette, so quantization is
//! lossless; RGB input is median-cut quantized to 256 colors.

use crate::warp::ImageFrame;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GifError {
    #[error("gif needs at least one frame")]
    NoFrames,
    #[error("frame {index} is {got:?}, expected {expect:?}")]
    DimMismatch {
        index: usize,
        got: (usize, usize, usize),
        expect: (usize, usize, usize),
    },
    #[error("fps {0} outside [1, 100]")]
    BadFps(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GifError>;

/// A palettized animation ready for encoding.
pub struct GifStream {
    w: usize,
    h: usize,
    palette: Vec<[u8; 3]>,
    /// (indexed pixels, delay in centiseconds) per frame.
    frames: Vec<(Vec<u8>, u16)>,
    loop_forever: bool,
}

impl GifStream {
    /// Quantize frames against a shared global palette. Delay is
    /// round(100/fps) centiseconds for every frame.
    pub fn from_frames(frames: &[ImageFrame], fps: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(GifError::NoFrames);
        }
        if !(1..=100).contains(&fps) {
            return Err(GifError::BadFps(fps));
        }
        let expect = (frames[0].h(), frames[0].w(), frames[0].channels());
        for (index, f) in frames.iter().enumerate() {
            let got = (f.h(), f.w(), f.channels());
            if got != expect {
                return Err(GifError::DimMismatch { index, got, expect });
            }
        }
        let delay = (100.0 / fps as f64).round() as u16;
        let (h, w, c) = expect;
        let (palette, indexed) = if c == 1 {
            // identity gray ramp: index == intensity
            let palette: Vec<[u8; 3]> = (0..256).map(|v| [v as u8; 3]).collect();
            let indexed = frames
                .iter()
                .map(|f| {
                    let cl = f.clamped();
                    (0..h * w)
                        .map(|p| (cl.get(p / w, p % w, 0) * 255.0).round() as u8)
                        .collect::<Vec<u8>>()
                })
                .collect();
            (palette, indexed)
        } else {
            quantize_rgb(frames, h, w)
        };
        Ok(GifStream {
            w,
            h,
            palette,
            frames: indexed.into_iter().map(|px| (px, delay)).collect(),
            loop_forever: true,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn frames(&self) -> &[(Vec<u8>, u16)] {
        &self.frames
    }

    /// Serialize to GIF89a bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"GIF89a");
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        // global color table present, 8 bits/channel, 256 entries
        out.push(0b1111_0111);
        out.push(0); // background color index
        out.push(0); // square pixels
        for i in 0..256 {
            let rgb = self.palette.get(i).copied().unwrap_or([0; 3]);
            out.extend_from_slice(&rgb);
        }
        if self.loop_forever {
            out.extend_from_slice(&[0x21, 0xFF, 0x0B]);
            out.extend_from_slice(b"NETSCAPE2.0");
            out.extend_from_slice(&[0x03, 0x01, 0x00, 0x00, 0x00]);
        }
        for (pixels, delay) in &self.frames {
            // graphic control: no disposal, no transparency
            out.extend_from_slice(&[0x21, 0xF9, 0x04, 0x00]);
            out.extend_from_slice(&delay.to_le_bytes());
            out.extend_from_slice(&[0x00, 0x00]);
            // image descriptor at origin, no local table
            out.push(0x2C);
            out.extend_from_slice(&[0, 0, 0, 0]);
            out.extend_from_slice(&(self.w as u16).to_le_bytes());
            out.extend_from_slice(&(self.h as u16).to_le_bytes());
            out.push(0);
            out.push(8); // LZW minimum code size
            let compressed = lzw_encode(8, pixels);
            for chunk in compressed.chunks(255) {
                out.push(chunk.len() as u8);
                out.extend_from_slice(chunk);
            }
            out.push(0);
        }
        out.push(0x3B);
        out
    }
}

/// Encode frames and write the file.
pub fn encode_gif(frames: &[ImageFrame], fps: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stream = GifStream::from_frames(frames, fps)?;
    std::fs::write(path, stream.encode()).map_err(|source| GifError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Median-cut quantization of RGB frames to a 256-color global palette.
fn quantize_rgb(frames: &[ImageFrame], h: usize, w: usize) -> (Vec<[u8; 3]>, Vec<Vec<u8>>) {
    let mut pixels: Vec<[u8; 3]> = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        let cl = f.clamped();
        for i in 0..h {
            for j in 0..w {
                pixels.push([
                    (cl.get(i, j, 0) * 255.0).round() as u8,
                    (cl.get(i, j, 1) * 255.0).round() as u8,
                    (cl.get(i, j, 2) * 255.0).round() as u8,
                ]);
            }
        }
    }
    // boxes are index ranges over a mutable copy of the pixel list
    let mut work = pixels.clone();
    work.sort_unstable();
    work.dedup();
    let mut boxes: Vec<(usize, usize)> = vec![(0, work.len())];
    while boxes.len() < 256 {
        // split the box with the largest channel spread
        let mut best: Option<(usize, usize, u8)> = None; // (box, channel, spread)
        for (bi, &(lo, hi)) in boxes.iter().enumerate() {
            if hi - lo < 2 {
                continue;
            }
            for ch in 0..3 {
                let (mut min, mut max) = (255u8, 0u8);
                for p in &work[lo..hi] {
                    min = min.min(p[ch]);
                    max = max.max(p[ch]);
                }
                let spread = max - min;
                if best.map(|b| spread > b.2).unwrap_or(spread > 0) {
                    best = Some((bi, ch, spread));
                }
            }
        }
        let Some((bi, ch, _)) = best else { break };
        let (lo, hi) = boxes[bi];
        work[lo..hi].sort_unstable_by_key(|p| p[ch]);
        let mid = lo + (hi - lo) / 2;
        boxes[bi] = (lo, mid);
        boxes.push((mid, hi));
    }
    let palette: Vec<[u8; 3]> = boxes
        .iter()
        .map(|&(lo, hi)| {
            let n = (hi - lo).max(1) as u32;
            let mut acc = [0u32; 3];
            for p in &work[lo..hi] {
                for ch in 0..3 {
                    acc[ch] += p[ch] as u32;
                }
            }
            [
                (acc[0] / n) as u8,
                (acc[1] / n) as u8,
                (acc[2] / n) as u8,
            ]
        })
        .collect();
    // nearest-palette assignment, memoized per exact color
    let mut memo: HashMap<[u8; 3], u8> = HashMap::new();
    let mut nearest = |c: [u8; 3]| -> u8 {
        *memo.entry(c).or_insert_with(|| {
            let mut best = (0usize, u32::MAX);
            for (i, p) in palette.iter().enumerate() {
                let d = p
                    .iter()
                    .zip(&c)
                    .map(|(&a, &b)| {
                        let d = a as i32 - b as i32;
                        (d * d) as u32
                    })
                    .sum::<u32>();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0 as u8
        })
    };
    let mut indexed = Vec::with_capacity(frames.len());
    let mut cursor = 0usize;
    for _ in frames {
        let mut idxs = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            idxs.push(nearest(pixels[cursor]));
            cursor += 1;
        }
        indexed.push(idxs);
    }
    (palette, indexed)
}

struct BitWriter {
    out: Vec<u8>,
    cur: u32,
    bits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            out: Vec::new(),
            cur: 0,
            bits: 0,
        }
    }

    fn put(&mut self, code: u16, width: u32) {
        self.cur |= (code as u32) << self.bits;
        self.bits += width;
        while self.bits >= 8 {
            self.out.push((self.cur & 0xFF) as u8);
            self.cur >>= 8;
            self.bits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.bits > 0 {
            self.out.push((self.cur & 0xFF) as u8);
        }
        self.out
    }
}

/// GIF-variant LZW: variable code width, clear/eoi codes, 4096-entry cap.
fn lzw_encode(min_code_size: u32, data: &[u8]) -> Vec<u8> {
    let clear: u16 = 1 << min_code_size;
    let eoi: u16 = clear + 1;
    let mut width = min_code_size + 1;
    let mut next: u16 = eoi + 1;
    let mut dict: HashMap<(u16, u8), u16> = HashMap::new();
    let mut w = BitWriter::new();
    w.put(clear, width);
    let mut iter = data.iter();
    let Some(&first) = iter.next() else {
        w.put(eoi, width);
        return w.finish();
    };
    let mut prefix = first as u16;
    for &b in iter {
        if let Some(&code) = dict.get(&(prefix, b)) {
            prefix = code;
            continue;
        }
        w.put(prefix, width);
        dict.insert((prefix, b), next);
        next += 1;
        if next == 4096 {
            w.put(clear, width);
            width = min_code_size + 1;
            next = eoi + 1;
            dict.clear();
        } else if next == (1 << width) {
            width += 1;
        }
        prefix = b as u16;
    }
    w.put(prefix, width);
    w.put(eoi, width);
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_trailer_bytes() {
        let frame = ImageFrame::zeros(4, 4, 1);
        let bytes = GifStream::from_frames(&[frame], 10).unwrap().encode();
        assert_eq!(&bytes[..6], b"GIF89a");
        assert_eq!(*bytes.last().unwrap(), 0x3B);
        // netscape loop extension present
        let needle = b"NETSCAPE2.0";
        assert!(bytes.windows(needle.len()).any(|w| w == needle));
    }

    #[test]
    fn delay_from_fps() {
        let frame = ImageFrame::zeros(2, 2, 1);
        let s = GifStream::from_frames(&[frame.clone(), frame], 25).unwrap();
        assert!(s.frames().iter().all(|&(_, d)| d == 4));
    }

    #[test]
    fn gray_palette_is_identity() {
        let frame = ImageFrame::from_fn(2, 2, 1, |i, j, _| (i * 2 + j) as f64 / 3.0);
        let s = GifStream::from_frames(&[frame], 10).unwrap();
        assert_eq!(s.palette()[0], [0, 0, 0]);
        assert_eq!(s.palette()[255], [255, 255, 255]);
        assert_eq!(s.palette()[77], [77, 77, 77]);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            GifStream::from_frames(&[], 10),
            Err(GifError::NoFrames)
        ));
        let a = ImageFrame::zeros(2, 2, 1);
        let b = ImageFrame::zeros(3, 2, 1);
        assert!(matches!(
            GifStream::from_frames(&[a.clone(), b], 10),
            Err(GifError::DimMismatch { index: 1, .. })
        ));
        assert!(matches!(
            GifStream::from_frames(&[a], 0),
            Err(GifError::BadFps(0))
        ));
    }

    #[test]
    fn rgb_quantization_stays_close() {
        // a smooth ramp should quantize within a few levels per channel
        let frame = ImageFrame::from_fn(8, 32, 3, |i, j, ch| {
            ((i * 7 + j * 3 + ch * 11) % 32) as f64 / 31.0
        });
        let s = GifStream::from_frames(&[frame.clone()], 10).unwrap();
        let (idxs, _) = &s.frames()[0];
        for i in 0..8 {
            for j in 0..32 {
                let idx = idxs[i * 32 + j] as usize;
                let got = s.palette()[idx];
                for ch in 0..3 {
                    let want = (frame.get(i, j, ch) * 255.0).round();
                    assert!(
                        (got[ch] as f64 - want).abs() <= 12.0,
                        "channel off by {}",
                        (got[ch] as f64 - want).abs()
                    );
                }
            }
        }
    }
}
