//! Image I/O, dataset assembly and the synthetic desk-scale tasks.

mod pgm;
mod png;
mod zlib;

pub use pgm::{decode_pgm, encode_pgm};
pub use png::{decode_png, encode_png};

use crate::warp::ImageFrame;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unrecognized image magic bytes")]
    BadMagic,
    #[error("file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("CRC mismatch in {chunk} chunk")]
    CrcMismatch { chunk: String },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Load a PGM (P5) or PNG image, dispatching on magic bytes. Values are
/// scaled into [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageFrame> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

/// Save as PGM or PNG depending on the file extension (.pgm / .png).
pub fn save_image(path: impl AsRef<Path>, frame: &ImageFrame) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let bytes = match ext.as_str() {
        "pgm" => encode_pgm(frame)?,
        "png" => encode_png(frame)?,
        other => {
            return Err(DataError::Unsupported(format!(
                "extension '{other}' (use .pgm or .png)"
            )))
        }
    };
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    Paired,
    Unpaired,
}

/// Training data: aligned (x0, x1) pairs, or two independent endpoint
/// pools for the adversarial setting.
#[derive(Clone, Debug)]
pub struct Dataset {
    mode: DatasetMode,
    paired: Vec<(ImageFrame, ImageFrame)>,
    x0_pool: Vec<ImageFrame>,
    x1_pool: Vec<ImageFrame>,
    h: usize,
    w: usize,
    channels: usize,
}

impl Dataset {
    pub fn paired(pairs: Vec<(ImageFrame, ImageFrame)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        let (h, w, c) = (pairs[0].0.h(), pairs[0].0.w(), pairs[0].0.channels());
        for (a, b) in &pairs {
            for img in [a, b] {
                if img.h() != h || img.w() != w || img.channels() != c {
                    return Err(DataError::Invalid(
                        "all images in a dataset must share dimensions".into(),
                    ));
                }
            }
        }
        Ok(Dataset {
            mode: DatasetMode::Paired,
            paired: pairs,
            x0_pool: Vec::new(),
            x1_pool: Vec::new(),
            h,
            w,
            channels: c,
        })
    }

    pub fn unpaired(x0_pool: Vec<ImageFrame>, x1_pool: Vec<ImageFrame>) -> Result<Self> {
        if x0_pool.is_empty() || x1_pool.is_empty() {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        let (h, w, c) = (x0_pool[0].h(), x0_pool[0].w(), x0_pool[0].channels());
        for img in x0_pool.iter().chain(&x1_pool) {
            if img.h() != h || img.w() != w || img.channels() != c {
                return Err(DataError::Invalid(
                    "all images in a dataset must share dimensions".into(),
                ));
            }
        }
        Ok(Dataset {
            mode: DatasetMode::Unpaired,
            paired: Vec::new(),
            x0_pool,
            x1_pool,
            h,
            w,
            channels: c,
        })
    }

    pub fn mode(&self) -> DatasetMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        match self.mode {
            DatasetMode::Paired => self.paired.len(),
            DatasetMode::Unpaired => self.x0_pool.len().min(self.x1_pool.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.channels)
    }

    pub fn pairs(&self) -> &[(ImageFrame, ImageFrame)] {
        &self.paired
    }

    pub fn x0_pool(&self) -> &[ImageFrame] {
        &self.x0_pool
    }

    pub fn x1_pool(&self) -> &[ImageFrame] {
        &self.x1_pool
    }
}

/// One training batch borrowed from a dataset.
pub enum Batch<'a> {
    Paired(Vec<(&'a ImageFrame, &'a ImageFrame)>),
    Unpaired {
        x0: Vec<&'a ImageFrame>,
        x1: Vec<&'a ImageFrame>,
    },
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn epoch_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Epoch-deterministic shuffled batches; the final partial batch is
/// dropped. Unpaired mode shuffles the two pools independently.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch<'_>>> {
    if ds.is_empty() {
        return Err(DataError::Invalid("empty dataset".into()));
    }
    if batch_size == 0 || batch_size > ds.len() {
        return Err(DataError::Invalid(format!(
            "batch size {} invalid for dataset of {}",
            batch_size,
            ds.len()
        )));
    }
    let n_batches = ds.len() / batch_size;
    let mut out = Vec::with_capacity(n_batches);
    match ds.mode {
        DatasetMode::Paired => {
            let order = shuffled_indices(ds.paired.len(), epoch_seed(seed, epoch, 0));
            for b in 0..n_batches {
                let items = order[b * batch_size..(b + 1) * batch_size]
                    .iter()
                    .map(|&i| (&ds.paired[i].0, &ds.paired[i].1))
                    .collect();
                out.push(Batch::Paired(items));
            }
        }
        DatasetMode::Unpaired => {
            let o0 = shuffled_indices(ds.x0_pool.len(), epoch_seed(seed, epoch, 1));
            let o1 = shuffled_indices(ds.x1_pool.len(), epoch_seed(seed, epoch, 2));
            for b in 0..n_batches {
                out.push(Batch::Unpaired {
                    x0: o0[b * batch_size..(b + 1) * batch_size]
                        .iter()
                        .map(|&i| &ds.x0_pool[i])
                        .collect(),
                    x1: o1[b * batch_size..(b + 1) * batch_size]
                        .iter()
                        .map(|&i| &ds.x1_pool[i])
                        .collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Soft multi-blob image: 2-4 gaussians, peak-normalized into [0, 1].
fn blob_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageFrame {
    let count = rng.random_range(2..=4);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.2 * h as f64..0.8 * h as f64),
                rng.random_range(0.2 * w as f64..0.8 * w as f64),
                rng.random_range(h.min(w) as f64 / 10.0..h.min(w) as f64 / 5.0),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut img = ImageFrame::from_fn(h, w, 1, |i, j, _| {
        blobs
            .iter()
            .map(|&(ci, cj, sigma, amp)| {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                amp * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    });
    let peak = img.pixels().iter().cloned().fold(0.0f64, f64::max);
    if peak > 1.0 {
        let scale = 1.0 / peak;
        img = ImageFrame::from_fn(h, w, 1, |i, j, _| img.get(i, j, 0) * scale);
    }
    img
}

/// Paired task: random blob images and their exact integer translations
/// (border zero-filled). x1[i][j] = x0[i - dy][j - dx].
pub fn synth_shift(
    n: usize,
    dims: (usize, usize),
    shift: (i64, i64),
    seed: u64,
) -> Result<Dataset> {
    let (h, w) = dims;
    let (dy, dx) = shift;
    if dy.unsigned_abs() as usize >= h / 4 + 1 || dx.unsigned_abs() as usize >= w / 4 + 1 {
        return Err(DataError::Invalid(format!(
            "shift ({dy},{dx}) too large for {h}x{w} (must be under a quarter extent)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = blob_image(&mut rng, h, w);
        let x1 = ImageFrame::from_fn(h, w, 1, |i, j, _| {
            let si = i as i64 - dy;
            let sj = j as i64 - dx;
            if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                x0.get(si as usize, sj as usize, 0)
            } else {
                0.0
            }
        });
        pairs.push((x0, x1));
    }
    Dataset::paired(pairs)
}

/// Unpaired task: class A is filled disks, class B the same disks pushed
/// through a fixed area-preserving squeeze (disks become ellipses). The
/// two pools are shuffled independently, so no element is aligned.
pub fn synth_two_class(n: usize, dims: (usize, usize), seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DataError::Invalid("need at least 2 samples per class".into()));
    }
    let (h, w) = dims;
    const SQUEEZE: f64 = 1.15;
    let disk = |rng: &mut ChaCha8Rng, squeeze: f64| -> ImageFrame {
        let ci = rng.random_range(0.35 * h as f64..0.65 * h as f64);
        let cj = rng.random_range(0.35 * w as f64..0.65 * w as f64);
        let r = rng.random_range(h.min(w) as f64 / 6.0..h.min(w) as f64 / 4.0);
        ImageFrame::from_fn(h, w, 1, |i, j, _| {
            // anisotropic distance: rows stretched, cols squeezed
            let di = (i as f64 - ci) * squeeze;
            let dj = (j as f64 - cj) / squeeze;
            let d = (di * di + dj * dj).sqrt();
            (r - d + 0.5).clamp(0.0, 1.0) // antialiased edge
        })
    };
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed ^ 0xA);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    let x0_pool: Vec<ImageFrame> = (0..n).map(|_| disk(&mut rng_a, 1.0)).collect();
    let x1_pool: Vec<ImageFrame> = (0..n).map(|_| disk(&mut rng_b, SQUEEZE)).collect();
    Dataset::unpaired(x0_pool, x1_pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    #[test]
    fn save_load_roundtrip_within_one_level() {
        let dir = std::env::temp_dir().join("warpode_data_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        for (name, channels) in [("rt.pgm", 1usize), ("rt.png", 1), ("rt_rgb.png", 3)] {
            let img = ImageFrame::from_fn(7, 5, channels, |_, _, _| rng.random_range(0.0..1.0));
            let path = dir.join(name);
            save_image(&path, &img).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!((back.h(), back.w(), back.channels()), (7, 5, channels));
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_image("/nonexistent/x.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn synth_shift_zero_is_identity_pair() {
        let ds = synth_shift(3, (16, 16), (0, 0), 5).unwrap();
        for (a, b) in ds.pairs() {
            assert_eq!(a.pixels(), b.pixels());
        }
    }

    #[test]
    fn synth_shift_columns_match() {
        let ds = synth_shift(2, (16, 16), (0, 3), 5).unwrap();
        for (x0, x1) in ds.pairs() {
            for i in 0..16 {
                for j in 3..16 {
                    assert_eq!(x1.get(i, j, 0), x0.get(i, j - 3, 0));
                }
                for j in 0..3 {
                    assert_eq!(x1.get(i, j, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn synth_shift_deterministic_and_bounded() {
        let a = synth_shift(4, (16, 16), (1, -2), 9).unwrap();
        let b = synth_shift(4, (16, 16), (1, -2), 9).unwrap();
        for ((a0, a1), (b0, b1)) in a.pairs().iter().zip(b.pairs()) {
            assert_eq!(a0.pixels(), b0.pixels());
            assert_eq!(a1.pixels(), b1.pixels());
        }
        for (x0, _) in a.pairs() {
            assert!(x0.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(synth_shift(1, (16, 16), (0, 8), 0).is_err());
    }

    #[test]
    fn two_class_mass_is_preserved_on_average() {
        let ds = synth_two_class(100, (28, 28), 3).unwrap();
        let mass = |pool: &[ImageFrame]| -> f64 {
            pool.iter()
                .map(|img| img.pixels().iter().sum::<f64>())
                .sum::<f64>()
                / pool.len() as f64
        };
        let (ma, mb) = (mass(ds.x0_pool()), mass(ds.x1_pool()));
        let rel = (ma - mb).abs() / ma;
        assert!(rel < 0.05, "mass differs by {rel}");
        for img in ds.x0_pool().iter().chain(ds.x1_pool()) {
            assert!(img.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn unpaired_batches_use_independent_orders() {
        let ds = synth_two_class(16, (12, 12), 1).unwrap();
        let mut any_differs = false;
        for seed in 0..10u64 {
            let bs = batches(&ds, 16, seed, 0).unwrap();
            let Batch::Unpaired { x0, x1 } = &bs[0] else {
                panic!()
            };
            // recover permutations by pointer identity
            let p0: Vec<usize> = x0
                .iter()
                .map(|f| {
                    ds.x0_pool()
                        .iter()
                        .position(|g| std::ptr::eq(*f, g))
                        .unwrap()
                })
                .collect();
            let p1: Vec<usize> = x1
                .iter()
                .map(|f| {
                    ds.x1_pool()
                        .iter()
                        .position(|g| std::ptr::eq(*f, g))
                        .unwrap()
                })
                .collect();
            if p0 != p1 {
                any_differs = true;
            }
        }
        assert!(any_differs);
    }

    #[test]
    fn batch_rules() {
        let ds = synth_shift(10, (8, 8), (0, 1), 2).unwrap();
        // batch_size == n: one batch with every element
        let bs = batches(&ds, 10, 0, 0).unwrap();
        assert_eq!(bs.len(), 1);
        let Batch::Paired(items) = &bs[0] else { panic!() };
        assert_eq!(items.len(), 10);
        // drop remainder: 10 / 3 -> 3 batches
        let bs = batches(&ds, 3, 0, 0).unwrap();
        assert_eq!(bs.len(), 3);
        // determinism per (seed, epoch)
        let a = batches(&ds, 3, 7, 4).unwrap();
        let b = batches(&ds, 3, 7, 4).unwrap();
        for (ba, bb) in a.iter().zip(&b) {
            let (Batch::Paired(x), Batch::Paired(y)) = (ba, bb) else {
                panic!()
            };
            for ((a0, _), (b0, _)) in x.iter().zip(y) {
                assert!(std::ptr::eq(*a0, *b0));
            }
        }
        // oversize and zero batch rejected
        assert!(batches(&ds, 11, 0, 0).is_err());
        assert!(batches(&ds, 0, 0, 0).is_err());
    }
}
