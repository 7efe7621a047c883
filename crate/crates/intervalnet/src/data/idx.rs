//! IDX container parsing (the MNIST distribution format), with transparent
//! gzip handling detected by magic bytes.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: at + 4,
            had: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Parses an IDX image file (magic 0x00000803) into a (count, rows*cols)
/// byte matrix plus the image dimensions.
pub fn load_idx_images(path: &Path) -> Result<(Array2<u8>, usize, usize)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: need,
            had: bytes.len(),
        });
    }
    let data = Array2::from_shape_vec((count, rows * cols), bytes[16..need].to_vec())
        .expect("shape from header");
    Ok((data, rows, cols))
}

/// Parses an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: need,
            had: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// A full train/test image-label store.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Arc<Array2<u8>>,
    pub labels: Vec<u8>,
}

/// MNIST-style directory layout: `train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`, optionally `.gz`-suffixed.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledImages, LabeledImages)> {
    let find = |stem: &str| -> Result<PathBuf> {
        for cand in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
            if cand.exists() {
                return Ok(cand);
            }
        }
        Err(Error::Config(format!(
            "dataset file {stem}[.gz] not found under {}",
            dir.display()
        )))
    };
    let load_pair = |img_stem: &str, lab_stem: &str| -> Result<LabeledImages> {
        let (images, _, _) = load_idx_images(&find(img_stem)?)?;
        let labels = load_idx_labels(&find(lab_stem)?)?;
        if images.nrows() != labels.len() {
            return Err(Error::CountMismatch { images: images.nrows(), labels: labels.len() });
        }
        Ok(LabeledImages { images: Arc::new(images), labels })
    };
    Ok((
        load_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, imgs: &[[u8; 4]]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(imgs.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        for img in imgs {
            bytes.extend_from_slice(img);
        }
        std::fs::File::create(path).unwrap().write_all(&bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::File::create(path).unwrap().write_all(&bytes).unwrap();
    }

    #[test]
    fn parses_images_and_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        write_idx_images(&p, &[[0, 128, 255, 7], [1, 2, 3, 4]]);
        let (data, rows, cols) = load_idx_images(&p).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(data[[0, 2]], 255);
        assert_eq!(data.nrows(), 2);
    }

    #[test]
    fn label_magic_on_image_path_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels");
        write_idx_labels(&p, &[1, 2, 3]);
        match load_idx_images(&p) {
            Err(Error::BadMagic { expected, got, .. }) => {
                assert_eq!(expected, IMAGE_MAGIC);
                assert_eq!(got, LABEL_MAGIC);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&5u32.to_be_bytes()); // claims 5 images
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 4]); // only 1 image worth of data
        std::fs::File::create(&p).unwrap().write_all(&bytes).unwrap();
        assert!(matches!(load_idx_images(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn gzip_detected_by_magic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("labels");
        write_idx_labels(&raw, &[3, 1, 4, 1, 5]);
        let gz = dir.path().join("labels.gz");
        let bytes = std::fs::read(&raw).unwrap();
        let f = std::fs::File::create(&gz).unwrap();
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_labels(&gz).unwrap(), vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn count_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), &[[0; 4], [1; 4]]);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[0, 1, 2]);
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &[[0; 4]]);
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[0]);
        assert!(matches!(
            load_mnist_dir(dir.path()),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }
}
