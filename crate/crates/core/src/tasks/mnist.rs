//! IDX reader for MNIST-style image and label files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::tasks::{Dataset, Split};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let actual = be_u32(bytes, 0);
    if actual != magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            actual,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Loads images (scaled to `[0, 1]`, flattened) and labels. Labels above 9
/// are accepted; `num_classes` is `max + 1`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    header(images_path, &img, IMAGE_MAGIC, 16)?;
    header(labels_path, &lab, LABEL_MAGIC, 8)?;
    let n_img = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    let n_lab = be_u32(&lab, 4) as usize;
    if n_img != n_lab {
        return Err(Error::IdxCount {
            images: n_img,
            labels: n_lab,
        });
    }
    let pixels = rows * cols;
    let want = 16 + n_img * pixels;
    if img.len() < want {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            expected: want,
            actual: img.len(),
        });
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            expected: 8 + n_lab,
            actual: lab.len(),
        });
    }
    let data: Vec<f64> = img[16..want].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset {
        features: Tensor::new([n_img, pixels], data)?,
        labels,
        mode_ids: None,
        num_classes,
        split: Split::Train,
    })
}

/// Loads `train-*` and `t10k-*` pairs from a directory holding the standard
/// uncompressed file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?
    .with_split(Split::Test);
    Ok((train, test))
}

/// Encodes IDX files; used to build fixtures.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        out.extend_from_slice(im);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let images: Vec<Vec<u8>> = (0..n).map(|i| (0..6).map(|p| ((i * 37 + p * 51) % 256) as u8).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, encode_idx_images(&images, 2, 3)).unwrap();
        fs::write(&lp, encode_idx_labels(&labels)).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 12);
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.features.shape(), &[12, 6]);
        assert_eq!(d.labels[11], 1);
        assert!(d.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.features.get2(1, 1), (37 + 51) as f64 / 255.0);
    }

    #[test]
    fn bad_magic_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x01;
        fs::write(&ip, bytes).unwrap();
        match load_mnist_idx(&ip, &lp) {
            Err(e @ Error::IdxMagic { expected, actual, .. }) => {
                assert_eq!((expected, actual), (IMAGE_MAGIC, LABEL_MAGIC));
                let msg = e.to_string();
                assert!(msg.contains("2051") && msg.contains("2049"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = fixture(dir.path(), 4);
        let lp = dir.path().join("short_labels");
        fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxCount { images: 4, labels: 3 })));

        let (ip, lp) = fixture(dir.path(), 4);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxTruncated { .. })));
    }
}
