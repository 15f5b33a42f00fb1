//! CIFAR-style binary datasets: one label byte followed by `3·H·W`
//! channel-planar pixel bytes per record.

use std::fs;
use std::path::Path;

use crate::augment::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub images: Vec<Image>,
}

pub fn record_len(height: usize, width: usize) -> usize {
    1 + 3 * height * width
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Records `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            labels: self.labels[range.clone()].to_vec(),
            images: self.images[range].to_vec(),
        }
    }

    pub fn decode(bytes: &[u8], height: usize, width: usize, path: &Path) -> Result<Self> {
        let rec = record_len(height, width);
        if bytes.is_empty() {
            return Err(Error::Dataset { path: path.into(), msg: "file contains no records".into() });
        }
        if !bytes.len().is_multiple_of(rec) {
            let whole = bytes.len() / rec;
            return Err(Error::Dataset {
                path: path.into(),
                msg: format!(
                    "length {} is not a multiple of the {rec}-byte record for {height}x{width} images: \
                     expected {} or {} bytes, record {whole} is cut off at offset {}",
                    bytes.len(),
                    whole * rec,
                    (whole + 1) * rec,
                    whole * rec
                ),
            });
        }
        let plane = 3 * height * width;
        let mut labels = Vec::with_capacity(bytes.len() / rec);
        let mut images = Vec::with_capacity(bytes.len() / rec);
        for r in bytes.chunks_exact(rec) {
            labels.push(r[0]);
            let data = r[1..].iter().map(|&b| b as f32 / 255.0).collect::<Vec<_>>();
            debug_assert_eq!(data.len(), plane);
            images.push(Image::new(height, width, data));
        }
        Ok(Self { height, width, labels, images })
    }

    /// Pixels are quantized with `round(v · 255)`, which inverts the `/255`
    /// of [`Dataset::decode`] exactly.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * record_len(self.height, self.width));
        for (label, img) in self.labels.iter().zip(&self.images) {
            out.push(*label);
            out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }
}

pub fn load_dataset(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::decode(&bytes, height, width, path)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.encode()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_black_record() {
        let bytes = vec![0u8; record_len(2, 3)];
        let d = Dataset::decode(&bytes, 2, 3, Path::new("x")).unwrap();
        assert_eq!(d.labels, vec![0]);
        assert!(d.images[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(d.encode(), bytes);
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let bytes = vec![0u8; 2 * record_len(32, 32)];
        let err = Dataset::decode(&bytes, 16, 16, Path::new("d.bin")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("769-byte record"), "{msg}");
        assert!(msg.contains("6146"), "{msg}");
    }
}
