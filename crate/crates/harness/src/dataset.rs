//! CIFAR-10 binary ingestion and the synthetic toy image set.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::path::{Path, PathBuf};

use semlink_tensor::rng::streams;
use semlink_tensor::{RngStream, Sampler, Tensor};

use crate::config::{DataConfig, DataSource};
use crate::error::{Error, IoContext, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const DATA_DIR_ENV: &str = "SEMLINK_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub label: u8,
    /// `[H, W, 3]` in `[0, 1]`.
    pub pixels: Tensor<f64>,
}

/// Decodes one CIFAR record: a label byte then 1024 R, 1024 G, 1024 B bytes.
pub fn decode_cifar_record(bytes: &[u8]) -> Result<DatasetRecord> {
    if bytes.len() != CIFAR_RECORD {
        return Err(Error::Dataset(format!(
            "record has {} bytes, want {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[p * 3 + c] = bytes[1 + c * plane + p] as f64 / 255.0;
        }
    }
    Ok(DatasetRecord {
        label: bytes[0],
        pixels: Tensor::new(vec![CIFAR_SIDE, CIFAR_SIDE, 3], data)?,
    })
}

/// Streams records from any reader of CIFAR binary data.
pub struct CifarReader<R> {
    inner: R,
    index: usize,
    done: bool,
}

impl<R: Read> CifarReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            index: 0,
            done: false,
        }
    }
}

impl<R: Read> Iterator for CifarReader<R> {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = vec![0u8; CIFAR_RECORD];
        let mut filled = 0;
        while filled < CIFAR_RECORD {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < CIFAR_RECORD {
            self.done = true;
            return Some(Err(Error::Dataset(format!(
                "truncated record {}: {filled} of {CIFAR_RECORD} bytes",
                self.index
            ))));
        }
        self.index += 1;
        Some(decode_cifar_record(&buf))
    }
}

/// Reads a whole CIFAR binary file, rejecting sizes that are not a multiple
/// of the record length.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = File::open(path).at(path)?;
    let len = file.metadata().at(path)?.len() as usize;
    if len % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{}: size {len} is not a multiple of {CIFAR_RECORD}",
            path.display()
        )));
    }
    CifarReader::new(BufReader::new(file)).collect()
}

/// Dataset root from `SEMLINK_DATA_DIR`.
pub fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Locates a CIFAR batch file (e.g. `test_batch.bin`) under `root` or its
/// `cifar-10-batches-bin` subdirectory.
pub fn find_cifar_file(root: &Path, name: &str) -> Option<PathBuf> {
    [root.join(name), root.join("cifar-10-batches-bin").join(name)]
        .into_iter()
        .find(|p| p.is_file())
}

pub fn cifar_train_files(root: &Path) -> Vec<PathBuf> {
    (1..=5)
        .filter_map(|i| find_cifar_file(root, &format!("data_batch_{i}.bin")))
        .collect()
}

fn blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| x[(r.clamp(0, h as isize - 1) as usize) * w + c.clamp(0, w as isize - 1) as usize];
    let mut tmp = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            tmp[r as usize * w + c as usize] = 0.25 * at(r, c - 1) + 0.5 * at(r, c) + 0.25 * at(r, c + 1);
        }
    }
    let at = |r: isize, c: isize| tmp[(r.clamp(0, h as isize - 1) as usize) * w + c as usize];
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            out[r as usize * w + c as usize] = 0.25 * at(r - 1, c) + 0.5 * at(r, c) + 0.25 * at(r + 1, c);
        }
    }
    out
}

fn toy_image(size: usize, r: &mut Sampler) -> DatasetRecord {
    let n = size * size;
    let mut tex: Vec<f64> = (0..n).map(|_| r.normal()).collect();
    for _ in 0..2 {
        tex = blur(&tex, size, size);
    }
    let amp = r.uniform_range(0.05, 0.2);
    let base: Vec<f64> = (0..3).map(|_| r.uniform_range(0.15, 0.85)).collect();
    let tint: Vec<f64> = (0..3).map(|_| r.uniform_range(0.5, 1.5)).collect();
    let color: Vec<f64> = (0..3).map(|_| r.uniform()).collect();
    let disk = r.below(2) == 1;
    let s = size as f64;
    let (cy, cx) = (r.uniform_range(0.2 * s, 0.8 * s), r.uniform_range(0.2 * s, 0.8 * s));
    let (ry, rx) = (r.uniform_range(0.15 * s, 0.4 * s), r.uniform_range(0.15 * s, 0.4 * s));
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            let inside = if disk {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            for c in 0..3 {
                let v = if inside { color[c] } else { base[c] };
                data[(y * size + x) * 3 + c] = (v + amp * tint[c] * tex[y * size + x]).clamp(0.0, 1.0);
            }
        }
    }
    DatasetRecord {
        label: disk as u8,
        pixels: Tensor::new(vec![size, size, 3], data).expect("sized"),
    }
}

/// Blurred random textures with one rectangle or ellipse on top. Labels are
/// 0 for rectangles, 1 for ellipses. Image `i` depends only on `(seed, i)`.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> Vec<DatasetRecord> {
    let base = RngStream::new(seed, streams::DATA);
    (0..n)
        .map(|i| toy_image(size, &mut base.child(i as u64).rng()))
        .collect()
}

/// Train/validation split of the toy set: validation images come after the
/// training images in the same sequence.
pub fn toy_split(train: usize, val: usize, size: usize, seed: u64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let mut all = toy_dataset(train + val, size, seed);
    let val_set = all.split_off(train);
    (all, val_set)
}

pub fn pixels(records: &[DatasetRecord]) -> Vec<Tensor<f64>> {
    records.iter().map(|r| r.pixels.clone()).collect()
}

/// Training and validation pixels for a run. CIFAR reads the training
/// batches and `test_batch.bin` under `SEMLINK_DATA_DIR`.
pub fn load_split(cfg: &DataConfig, seed: u64) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    match cfg.source {
        DataSource::Toy => {
            let (t, v) = toy_split(cfg.train_images, cfg.val_images, cfg.image_size, seed);
            Ok((pixels(&t), pixels(&v)))
        }
        DataSource::Cifar => {
            if cfg.image_size != CIFAR_SIDE {
                return Err(Error::Config(format!("CIFAR images are {CIFAR_SIDE}x{CIFAR_SIDE}")));
            }
            let root = data_dir().ok_or_else(|| Error::Dataset(format!("{DATA_DIR_ENV} is not set")))?;
            let files = cifar_train_files(&root);
            if files.is_empty() {
                return Err(Error::Dataset(format!("no data_batch_*.bin under {}", root.display())));
            }
            let mut train = Vec::new();
            for f in files {
                if train.len() >= cfg.train_images {
                    break;
                }
                train.extend(load_cifar_binary(&f)?.into_iter().map(|r| r.pixels));
            }
            train.truncate(cfg.train_images);
            let test = find_cifar_file(&root, "test_batch.bin")
                .ok_or_else(|| Error::Dataset(format!("no test_batch.bin under {}", root.display())))?;
            let mut val: Vec<_> = load_cifar_binary(&test)?.into_iter().map(|r| r.pixels).collect();
            val.truncate(cfg.val_images);
            Ok((train, val))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_in_range_and_reproducible() {
        let a = toy_dataset(5, 8, 1);
        let b = toy_dataset(5, 8, 1);
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a[0], a[1]);
        assert_eq!(toy_dataset(3, 16, 1)[0].pixels.shape(), &[16, 16, 3]);
    }

    #[test]
    fn split_is_a_prefix_cut() {
        let (t, v) = toy_split(3, 2, 8, 4);
        let all = toy_dataset(5, 8, 4);
        assert_eq!(t, all[..3]);
        assert_eq!(v, all[3..]);
    }
}
