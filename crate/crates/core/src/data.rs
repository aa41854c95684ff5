//! Dataset ingestion: IDX containers (MNIST family) and a plain CSV fallback
//! with one `label,pixel,pixel,...` row per sample.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};
use crate::net::{quantize_input, SamplePresentation, Shape};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX container.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::data(
            path,
            format!("truncated header at byte offset {}", bytes.len()),
        ));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic >> 8 != 0x08 {
        return Err(Error::data(
            path,
            format!("bad magic 0x{magic:08x} (expected unsigned-byte IDX)"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    if ndims == 0 {
        return Err(Error::data(path, "IDX file with zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::data(
            path,
            format!("truncated header at byte offset {} (need {header})", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::data(path, format!("dimension overflow {dims:?}")))?;
    let end = header
        .checked_add(total)
        .ok_or_else(|| Error::data(path, format!("dimension overflow {dims:?}")))?;
    if bytes.len() < end {
        return Err(Error::data(
            path,
            format!(
                "truncated payload at byte offset {} (expected {end} bytes)",
                bytes.len()
            ),
        ));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..end].to_vec(),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

fn expect_magic(arr: &IdxArray, magic: u32, what: &str, path: &Path) -> Result<()> {
    if arr.magic != magic {
        return Err(Error::data(
            path,
            format!("expected {what} magic 0x{magic:08x}, found 0x{:08x}", arr.magic),
        ));
    }
    Ok(())
}

/// Labeled 8-bit images held flat in height-width-channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub shape: Shape,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: Shape, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != shape.size() * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} samples of {shape}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            shape,
            pixels,
            labels,
        })
    }

    pub fn from_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (ip, lp) = (images.as_ref(), labels.as_ref());
        let img = load_idx(ip)?;
        expect_magic(&img, IDX_IMAGES_MAGIC, "image", ip)?;
        let lab = load_idx(lp)?;
        expect_magic(&lab, IDX_LABELS_MAGIC, "label", lp)?;
        let n = img.dims[0];
        if lab.dims[0] != n {
            return Err(Error::data(lp, format!("{} labels for {n} images", lab.dims[0])));
        }
        let (h, w) = (img.dims[1], img.dims[2]);
        Dataset::new(Shape::new(w, h, 1), img.data, lab.data)
    }

    /// Reads `label,p0,p1,...` rows. Blank lines and lines starting with `#`
    /// are skipped; a non-numeric first row is treated as a header.
    pub fn from_csv(path: impl AsRef<Path>, shape: Shape) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| s.parse::<u8>();
            let Ok(label) = parse(fields[0]) else {
                if labels.is_empty() && pixels.is_empty() {
                    continue;
                }
                return Err(Error::data(
                    path,
                    format!("line {}: bad label {:?}", lineno + 1, fields[0]),
                ));
            };
            if fields.len() != 1 + shape.size() {
                return Err(Error::data(
                    path,
                    format!(
                        "line {}: {} pixel values, expected {}",
                        lineno + 1,
                        fields.len() - 1,
                        shape.size()
                    ),
                ));
            }
            for f in &fields[1..] {
                pixels.push(
                    parse(f)
                        .map_err(|_| Error::data(path, format!("line {}: bad pixel {f:?}", lineno + 1)))?,
                );
            }
            labels.push(label);
        }
        Dataset::new(shape, pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.size();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn presentation(&self, i: usize, t: u32) -> SamplePresentation {
        SamplePresentation {
            input: quantize_input(self.image(i), t),
            label: Some(self.label(i)),
        }
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.size());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            pixels,
            labels,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Indices of every sample whose label is in `classes`, in file order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.label(i)))
            .collect()
    }
}

/// Standard file names of the MNIST-family IDX distribution.
pub fn idx_pair(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let p = Path::new("mem");
        let img = parse_idx(
            &idx_bytes(
                IDX_IMAGES_MAGIC,
                &[2, 2, 3],
                &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
            ),
            p,
        )
        .unwrap();
        assert_eq!(img.dims, vec![2, 2, 3]);
        assert_eq!(img.data.len(), 12);
        let lab = parse_idx(&idx_bytes(IDX_LABELS_MAGIC, &[2], &[7, 1]), p).unwrap();
        assert_eq!(lab.data, vec![7, 1]);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 5]);
        let err = parse_idx(&b, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("offset 21"), "{err}");
        let err = parse_idx(&b[..6], Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("offset 6"), "{err}");
    }

    #[test]
    fn bad_magic_and_overflow() {
        assert!(parse_idx(&idx_bytes(0x0000_0d03, &[1, 1, 1], &[0]), Path::new("x")).is_err());
        let huge = idx_bytes(IDX_IMAGES_MAGIC, &[u32::MAX, u32::MAX, u32::MAX], &[]);
        let err = parse_idx(&huge, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("overflow") || err.contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_container_type_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 1, 2, 3])).unwrap();
        fs::write(&lp, idx_bytes(IDX_IMAGES_MAGIC, &[1, 1, 1], &[3])).unwrap();
        assert!(Dataset::from_idx(&ip, &lp).is_err());
        fs::write(&lp, idx_bytes(IDX_LABELS_MAGIC, &[1], &[3])).unwrap();
        let d = Dataset::from_idx(&ip, &lp).unwrap();
        assert_eq!(d.shape, Shape::new(2, 2, 1));
        assert_eq!(d.label(0), 3);
    }

    #[test]
    fn csv_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "label,a,b,c,d\n# comment\n1,0,255,3,4\n0,9,9,9,9\n").unwrap();
        let d = Dataset::from_csv(&p, Shape::new(2, 2, 1)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image(0), &[0, 255, 3, 4]);
        assert_eq!(d.presentation(0, 64).input, vec![0, 63, 0, 1]);
        fs::write(&p, "1,0,255\n").unwrap();
        assert!(Dataset::from_csv(&p, Shape::new(2, 2, 1)).is_err());
    }
}
