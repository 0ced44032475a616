use std::path::Path;

use super::Dataset;
use crate::numkit::Matrix;
use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct IdxTensor {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(fail("file shorter than the 4-byte magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(fail(format!(
            "bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let n_dims = (magic & 0xff) as usize;
    let header_len = 4 + 4 * n_dims;
    if bytes.len() < header_len {
        return Err(fail("truncated dimension header".into()));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload holds {} bytes but dimensions {dims:?} need {expected}",
            payload.len()
        )));
    }
    Ok(IdxTensor {
        dims,
        payload: payload.to_vec(),
    })
}

/// Reads an IDX image file (3-D unsigned-byte tensor) and its IDX label file
/// (1-D unsigned-byte tensor). Pixels are divided by 255 and the class count
/// is `max(label) + 1`.
pub fn load_idx_dataset(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx(images_path.as_ref(), IMAGE_MAGIC)?;
    let labels = read_idx(labels_path.as_ref(), LABEL_MAGIC)?;
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.dims[0])));
    }
    let n_features = images.dims[1] * images.dims[2];
    let features: Vec<f64> = images.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels.payload.iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(n, n_features, features)?, labels, n_classes)
}

/// Writes a dataset back to IDX. Features are rescaled to bytes; `rows * cols`
/// must equal the feature width.
pub fn write_idx_dataset(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != dataset.n_features() {
        return Err(Error::Consistency(format!(
            "{rows}x{cols} images do not match {} features",
            dataset.n_features()
        )));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend(
        dataset
            .features()
            .as_slice()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    std::fs::write(images_path, img).map_err(|e| Error::io(format!("writing {}", images_path.display()), e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(format!("writing {}", labels_path.display()), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_small_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[3, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0]);
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend_from_slice(&[0, 2, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 4);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.features().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[0, 2, 1]);
    }

    #[test]
    fn mnist_sized_header_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let n = 60_000u32;
        let mut img = header(IMAGE_MAGIC, &[n, 28, 28]);
        img.resize(img.len() + (n as usize) * 784, 0);
        let mut lab = header(LABEL_MAGIC, &[n]);
        lab.extend((0..n).map(|i| (i % 10) as u8));
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.n_classes()), (60_000, 784, 10));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[1, 2, 3]);
        let mut lab = header(LABEL_MAGIC, &[2]);
        lab.extend_from_slice(&[0, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn image_file_passed_as_labels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[1, 1, 1]);
        img.push(7);
        let (ip, _) = write_pair(dir.path(), &img, &[]);
        let err = load_idx_dataset(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("0x00000803"), "{err}");
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[2, 1, 1]);
        img.extend_from_slice(&[1, 2]);
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend_from_slice(&[0, 1, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            Matrix::from_vec(2, 4, vec![0.0, 1.0, 0.2, 0.4, 1.0, 1.0, 0.0, 0.0]).unwrap(),
            vec![1, 0],
            2,
        )
        .unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_dataset(&ds, 2, 2, &ip, &lp).unwrap();
        assert_eq!(load_idx_dataset(&ip, &lp).unwrap(), ds);
    }
}
