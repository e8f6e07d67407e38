//! Classic IDX binary format (big-endian dimensions, u8 payload), as used
//! by the MNIST family.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated {
                path: path.display().to_string(),
            }
        } else {
            io_err(path, e)
        }
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload(r: &mut impl Read, len: usize, path: &Path) -> Result<Vec<u8>, DataError> {
    let mut data = vec![0u8; len];
    r.read_exact(&mut data).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated {
                path: path.display().to_string(),
            }
        } else {
            io_err(path, e)
        }
    })?;
    Ok(data)
}

/// Loads an images/labels file pair. Pixels are scaled to `[0, 1]` and the
/// class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut ir = BufReader::new(File::open(images_path).map_err(|e| io_err(images_path, e))?);
    let magic = read_u32_be(&mut ir, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&mut ir, images_path)? as usize;
    let rows = read_u32_be(&mut ir, images_path)? as usize;
    let cols = read_u32_be(&mut ir, images_path)? as usize;
    let pixels = read_payload(&mut ir, n * rows * cols, images_path)?;

    let mut lr = BufReader::new(File::open(labels_path).map_err(|e| io_err(labels_path, e))?);
    let magic = read_u32_be(&mut lr, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let ln = read_u32_be(&mut lr, labels_path)? as usize;
    if ln != n {
        return Err(DataError::IdxCountMismatch { images: n, labels: ln });
    }
    let raw_labels = read_payload(&mut lr, ln, labels_path)?;

    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<u32> = raw_labels.iter().map(|&l| l as u32).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(
        Tensor::from_vec(&[n, 1, rows, cols], data),
        labels,
        num_classes,
    )
}

/// Writes a `[N, 1, rows, cols]` dataset back to an IDX pair. Pixel values
/// are quantized to `round(v * 255)`, so datasets that came from IDX files
/// round-trip exactly.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let shape = ds.inputs.shape();
    assert_eq!(shape.len(), 4, "IDX writer expects [N, 1, rows, cols] inputs");
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);

    let mut iw = BufWriter::new(File::create(images_path).map_err(|e| io_err(images_path, e))?);
    iw.write_all(&IMAGES_MAGIC.to_be_bytes())
        .map_err(|e| io_err(images_path, e))?;
    for dim in [n, rows, cols] {
        iw.write_all(&(dim as u32).to_be_bytes())
            .map_err(|e| io_err(images_path, e))?;
    }
    let bytes: Vec<u8> = ds
        .inputs
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    iw.write_all(&bytes).map_err(|e| io_err(images_path, e))?;
    iw.flush().map_err(|e| io_err(images_path, e))?;

    let mut lw = BufWriter::new(File::create(labels_path).map_err(|e| io_err(labels_path, e))?);
    lw.write_all(&LABELS_MAGIC.to_be_bytes())
        .map_err(|e| io_err(labels_path, e))?;
    lw.write_all(&(n as u32).to_be_bytes())
        .map_err(|e| io_err(labels_path, e))?;
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    lw.write_all(&labels).map_err(|e| io_err(labels_path, e))?;
    lw.flush().map_err(|e| io_err(labels_path, e))?;
    Ok(())
}
