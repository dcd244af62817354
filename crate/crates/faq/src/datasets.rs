//! MNIST (IDX) and CIFAR-10 (binary batch) readers and writers.

use std::fs;
use std::path::{Path, PathBuf};

use faq_core::data::{Dataset, Split};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

pub const MNIST_TRAIN: usize = 60_000;
pub const MNIST_TEST: usize = 10_000;
pub const CIFAR_TRAIN: usize = 50_000;
pub const CIFAR_TEST: usize = 10_000;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

const IDX_UBYTE: u8 = 0x08;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            file: file.into(),
            offset: bytes.len() as u64,
            msg: "header truncated".into(),
        })
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
pub fn parse_idx(bytes: &[u8], file: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(Error::Parse {
            file: file.into(),
            offset: bytes.len() as u64,
            msg: "header truncated".into(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse {
            file: file.into(),
            offset: 0,
            msg: format!("bad magic {:02x}{:02x}", bytes[0], bytes[1]),
        });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Parse {
            file: file.into(),
            offset: 2,
            msg: format!("element type {:#04x} is not unsigned byte", bytes[2]),
        });
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Parse {
            file: file.into(),
            offset: 3,
            msg: "rank 0".into(),
        });
    }
    let dims = (0..rank)
        .map(|k| be_u32(bytes, 4 + 4 * k, file).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected = header as u64 + dims.iter().map(|&d| d as u64).product::<u64>();
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            file: file.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn mnist_names(split: Split) -> (&'static str, &'static str, usize) {
    match split {
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", MNIST_TEST),
        _ => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", MNIST_TRAIN),
    }
}

/// Reads an IDX image/label pair. With `expect`, the record count must
/// match.
pub fn load_mnist_files(images: &Path, labels: &Path, split: Split, expect: Option<usize>) -> Result<Dataset> {
    let (dims, pixels) = parse_idx(&read(images)?, images)?;
    if dims.len() != 3 {
        return Err(Error::Parse {
            file: images.into(),
            offset: 3,
            msg: format!("image file has rank {}, expected 3", dims.len()),
        });
    }
    let (ldims, lab) = parse_idx(&read(labels)?, labels)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(Error::Parse {
            file: labels.into(),
            offset: 4,
            msg: format!("{:?} labels for {} images", ldims, dims[0]),
        });
    }
    if let Some(n) = expect {
        if dims[0] != n {
            return Err(Error::Parse {
                file: images.into(),
                offset: 4,
                msg: format!("{} records, expected {n}", dims[0]),
            });
        }
    }
    if let Some(i) = lab.iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            file: labels.into(),
            offset: 8 + i as u64,
            msg: format!("label {} out of range", lab[i]),
        });
    }
    Ok(Dataset::new(split, [dims[1], dims[2], 1], 10, pixels, lab)?)
}

/// Standard MNIST files in `dir`; the record count is checked against the
/// published sizes.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab, n) = mnist_names(split);
    load_mnist_files(&dir.join(img), &dir.join(lab), split, Some(n))
}

pub fn save_mnist_files(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let img = encode_idx(&[data.len(), data.height, data.width], data.images());
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    let lab = encode_idx(&[data.len()], data.labels());
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

/// Decodes CIFAR-10 binary records (label byte, then 1024 bytes per
/// channel in RGB plane order) into HWC images.
pub fn parse_cifar(bytes: &[u8], file: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let n = bytes.len() / CIFAR_RECORD;
        return Err(Error::Length {
            file: file.into(),
            expected: ((n + 1) * CIFAR_RECORD) as u64,
            actual: bytes.len() as u64,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = vec![0u8; n * 3072];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                file: file.into(),
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0]);
        let img = &mut images[r * 3072..(r + 1) * 3072];
        for ch in 0..3 {
            for p in 0..1024 {
                img[p * 3 + ch] = rec[1 + ch * 1024 + p];
            }
        }
    }
    Ok((images, labels))
}

pub fn encode_cifar(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels()[i]);
        let img = data.image(i);
        for ch in 0..3 {
            out.extend((0..1024).map(|p| img[p * 3 + ch]));
        }
    }
    out
}

fn cifar_names(split: Split) -> (Vec<String>, usize) {
    match split {
        Split::Test => (vec!["test_batch.bin".into()], CIFAR_TEST),
        _ => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), CIFAR_TRAIN),
    }
}

pub fn load_cifar_files(files: &[PathBuf], split: Split, expect: Option<usize>) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (i, l) = parse_cifar(&read(f)?, f)?;
        images.extend(i);
        labels.extend(l);
    }
    if let Some(n) = expect {
        if labels.len() != n {
            return Err(Error::Length {
                file: files.first().cloned().unwrap_or_default(),
                expected: (n * CIFAR_RECORD) as u64,
                actual: (labels.len() * CIFAR_RECORD) as u64,
            });
        }
    }
    Ok(Dataset::new(split, [32, 32, 3], 10, images, labels)?)
}

/// Standard CIFAR-10 binary batches in `dir`.
pub fn load_cifar(dir: &Path, split: Split) -> Result<Dataset> {
    let (names, n) = cifar_names(split);
    let files: Vec<PathBuf> = names.iter().map(|f| dir.join(f)).collect();
    load_cifar_files(&files, split, Some(n))
}

pub fn load_dataset(dir: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Cifar10 => load_cifar(dir, split),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, c: usize, side: usize) -> Dataset {
        let images = (0..n * side * side * c).map(|i| (i * 37 % 251) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(Split::Train, [side, side, c], 10, images, labels).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let d = toy(7, 1, 28);
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        save_mnist_files(&d, &i, &l).unwrap();
        let back = load_mnist_files(&i, &l, Split::Train, Some(7)).unwrap();
        assert_eq!(back, d);
        assert!(load_mnist_files(&i, &l, Split::Train, Some(60_000)).is_err());
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let f = Path::new("x");
        let good = encode_idx(&[2, 2], &[1, 2, 3, 4]);
        match parse_idx(&good[..good.len() - 1], f) {
            Err(Error::Length { expected, actual, .. }) => assert_eq!((expected, actual), (16, 15)),
            other => panic!("{other:?}"),
        }
        let mut bad = good.clone();
        bad[0] = 1;
        assert!(matches!(parse_idx(&bad, f), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&good[..6], f), Err(Error::Parse { offset: 6, .. })));
        let mut float = good;
        float[2] = 0x0d;
        assert!(matches!(parse_idx(&float, f), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn cifar_round_trip_and_layout() {
        let d = toy(3, 3, 32);
        let bytes = encode_cifar(&d);
        assert_eq!(bytes.len(), 3 * CIFAR_RECORD);
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[CIFAR_RECORD], 1);
        // red plane comes first: byte 1 is pixel 0's red value
        assert_eq!(bytes[1], d.image(0)[0]);
        assert_eq!(bytes[1 + 1024], d.image(0)[1]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, &bytes).unwrap();
        assert_eq!(load_cifar_files(&[p.clone()], Split::Train, Some(3)).unwrap(), d);
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_cifar_files(&[p], Split::Train, None) {
            Err(Error::Length { expected, actual, .. }) => assert_eq!((expected, actual), (9219, 9214)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn real_mnist_if_present() {
        let dir = crate::mnist_dir();
        if !dir.join("train-images-idx3-ubyte").exists() {
            return;
        }
        let train = load_mnist(&dir, Split::Train).unwrap();
        assert_eq!((train.len(), train.height, train.width, train.channels), (60_000, 28, 28, 1));
        assert_eq!(load_mnist(&dir, Split::Test).unwrap().len(), 10_000);
    }
}
