//! IDX (MNIST-style) image/label file ingestion.

use std::path::Path;

use super::{Dataset, Example, GroundTruth, Label, LearnError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    parse_idx(&image_bytes, &label_bytes)
}

struct Reader<'a> {
    file: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(LearnError::Truncated {
                file: self.file,
                needed: end,
                have: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(LearnError::BadMagic {
                file: self.file,
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Parse in-memory IDX buffers. Pixels are scaled to `[0, 1]` by `/ 255`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = Reader {
        file: "images",
        bytes: images,
        pos: 0,
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let dim = rows * cols;

    let mut lab = Reader {
        file: "labels",
        bytes: labels,
        pos: 0,
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(LearnError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let pixels = img.take(count * dim)?;
    let classes = lab.take(count)?;
    let examples: Vec<Example> = pixels
        .chunks_exact(dim.max(1))
        .take(count)
        .zip(classes)
        .map(|(px, &c)| Example {
            features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: Label::Class(usize::from(c)),
        })
        .collect();
    let max_label = classes.iter().copied().max().map_or(0, usize::from);
    Ok(Dataset {
        examples,
        feature_dim: dim,
        num_classes: Some((max_label + 1).max(10)),
        truth: GroundTruth::None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        out.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        out
    }

    fn labels(count: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        out.extend((0..count).map(|i| (i % 10) as u8));
        out
    }

    #[test]
    fn ten_mnist_images() {
        let ds = parse_idx(&images(10, 28, 28, 255), &labels(10)).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.feature_dim, 784);
        assert!(ds.examples.iter().all(|e| e.features.len() == 784));
        assert_eq!(ds.examples[0].features[0], 1.0);
        assert_eq!(ds.examples[3].label, Label::Class(3));
    }

    #[test]
    fn distinct_error_values() {
        let mut bad = labels(10);
        bad[3] = 0x03;
        assert!(matches!(
            parse_idx(&images(10, 28, 28, 0), &bad),
            Err(LearnError::BadMagic { file: "labels", .. })
        ));

        let mut short = images(10, 28, 28, 0);
        short.truncate(500);
        assert!(matches!(
            parse_idx(&short, &labels(10)),
            Err(LearnError::Truncated { file: "images", .. })
        ));

        assert!(matches!(
            parse_idx(&images(10, 28, 28, 0), &labels(9)),
            Err(LearnError::CountMismatch {
                images: 10,
                labels: 9
            })
        ));
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, images(3, 2, 2, 51)).unwrap();
        std::fs::write(&lp, labels(3)).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.examples[2].features, vec![0.2; 4]);
        assert!(matches!(
            load_idx(dir.path().join("missing"), &lp),
            Err(LearnError::Io(_))
        ));
    }
}
