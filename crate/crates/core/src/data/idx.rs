//! MNIST IDX files.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 `u8` image
//! arrays, `0x00000801` for rank-1 `u8` label arrays), one big-endian `u32`
//! per dimension, then the raw bytes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Digits as stored on disk: one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistRaw {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistRaw {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.rows * self.cols);
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

/// Parses an image file's bytes into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "IDX image file")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            "IDX image file",
            format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, "IDX image file")? as usize;
    let rows = read_u32(bytes, 8, "IDX image file")? as usize;
    let cols = read_u32(bytes, 12, "IDX image file")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            "IDX image file",
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload[..need].to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "IDX label file")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            "IDX label file",
            format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, "IDX label file")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            "IDX label file",
            format!("truncated payload: {} of {n} bytes", payload.len()),
        ));
    }
    Ok(payload[..n].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_mnist(images: &Path, labels: &Path) -> Result<MnistRaw> {
    let (n, rows, cols, pixels) = parse_images(&read(images)?)?;
    let labels_v = parse_labels(&read(labels)?)?;
    if labels_v.len() != n {
        return Err(Error::format(
            "MNIST pair",
            format!(
                "{} holds {n} images but {} holds {} labels",
                images.display(),
                labels.display(),
                labels_v.len()
            ),
        ));
    }
    Ok(MnistRaw {
        rows,
        cols,
        pixels,
        labels: labels_v,
    })
}

/// Serializes images and labels back into the two IDX byte streams.
pub fn encode(raw: &MnistRaw) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + raw.pixels.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [raw.len(), raw.rows, raw.cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(&raw.pixels);
    let mut lab = Vec::with_capacity(8 + raw.labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    lab.extend_from_slice(&raw.labels);
    (img, lab)
}

/// Paths of the four standard MNIST files under one directory.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    /// Checks that all four files exist, explaining how to get them if not.
    pub fn locate(dir: &Path) -> Result<Self> {
        let files = Self::in_dir(dir);
        let missing: Vec<&Path> = [
            &files.train_images,
            &files.train_labels,
            &files.test_images,
            &files.test_labels,
        ]
        .into_iter()
        .map(PathBuf::as_path)
        .filter(|p| !p.is_file())
        .collect();
        if missing.is_empty() {
            return Ok(files);
        }
        let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        let gz_hint = if missing.iter().any(|p| {
            p.with_extension("gz").is_file() || {
                let mut s = p.as_os_str().to_owned();
                s.push(".gz");
                Path::new(&s).is_file()
            }
        }) {
            " Compressed .gz copies were found; decompress them with `gunzip`."
        } else {
            ""
        };
        Err(Error::Config(format!(
            "MNIST files not found: {}. Download train-images-idx3-ubyte.gz, \
             train-labels-idx1-ubyte.gz, t10k-images-idx3-ubyte.gz and \
             t10k-labels-idx1-ubyte.gz from an MNIST mirror, gunzip them into {} \
             (or point --data-dir / THIN_DATA_DIR at their directory).{gz_hint}",
            names.join(", "),
            dir.display()
        )))
    }

    pub fn read_train(&self) -> Result<MnistRaw> {
        read_mnist(&self.train_images, &self.train_labels)
    }

    pub fn read_test(&self) -> Result<MnistRaw> {
        read_mnist(&self.test_images, &self.test_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MnistRaw {
        MnistRaw {
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 7, 8, 9, 10, 11, 12],
            labels: vec![3, 9],
        }
    }

    #[test]
    fn encode_then_parse() {
        let raw = tiny();
        let (img, lab) = encode(&raw);
        let (n, r, c, px) = parse_images(&img).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px, raw.pixels);
        assert_eq!(parse_labels(&lab).unwrap(), raw.labels);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let (img, lab) = encode(&tiny());
        assert!(matches!(parse_images(&lab), Err(Error::Format { .. })));
        assert!(matches!(parse_labels(&img), Err(Error::Format { .. })));
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(parse_images(&img[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = encode(&tiny());
        let mut one = tiny();
        one.labels.truncate(1);
        one.pixels.truncate(4);
        let (_, lab) = encode(&one);
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        let err = read_mnist(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
        assert!(err.to_string().contains("2 images"), "{err}");
    }

    #[test]
    fn missing_files_explain_download() {
        let dir = tempfile::tempdir().unwrap();
        let err = MnistFiles::locate(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("gunzip"));
    }
}
