//! Versioned binary model checkpoints.
//!
//! Layout: 4-byte magic, u32 LE version, 32-byte spec digest, then each
//! layer's parameters as little-endian f32 arrays in spec order. Loading
//! verifies the digest of the expected spec before touching any data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{LayerKind, Model, ModelSpec, Scalar};

const MAGIC: [u8; 4] = *b"FCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("spec digest mismatch: checkpoint was written for a different model spec")]
    DigestMismatch,
    #[error("checkpoint truncated while reading layer `{layer}`")]
    Truncated { layer: String },
}

/// SHA-256 over a canonical textual rendering of the spec. Any change to
/// layer names, kinds, shape parameters or the input shape changes the digest.
pub fn spec_digest(spec: &ModelSpec) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"input=");
    for d in &spec.input_shape {
        hasher.update(d.to_le_bytes());
    }
    for l in &spec.layers {
        hasher.update(l.name.as_bytes());
        hasher.update(b"=");
        let desc = match &l.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => format!("conv2d({in_channels},{out_channels},{kernel},{stride},{pad})"),
            LayerKind::Dense { out_features } => format!("dense({out_features})"),
            LayerKind::MaxPool2d { kernel, stride } => format!("maxpool2d({kernel},{stride})"),
            LayerKind::Flatten => "flatten".to_string(),
            LayerKind::Relu => "relu".to_string(),
            LayerKind::BatchNorm => "batchnorm".to_string(),
        };
        hasher.update(desc.as_bytes());
        hasher.update(b";");
    }
    hasher.finalize().into()
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec_digest(model.spec()))?;
    for layer in model.params() {
        for v in layer {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    spec: &ModelSpec,
    path: &Path,
) -> Result<Model<S>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != spec_digest(spec) {
        return Err(CheckpointError::DigestMismatch);
    }
    // Parameter layout is derived from the spec; seed is an initialization
    // detail and is not part of the on-disk format.
    let mut model =
        Model::<S>::build(spec, 0).expect("digest-validated spec must be constructible");
    let mut params = Vec::with_capacity(model.params().len());
    for (layer, existing) in spec.layers.iter().zip(model.params()) {
        let mut values = Vec::with_capacity(existing.len());
        for _ in 0..existing.len() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    CheckpointError::Truncated {
                        layer: layer.name.clone(),
                    }
                } else {
                    CheckpointError::Io(e)
                }
            })?;
            values.push(S::from_f64(f32::from_le_bytes(buf) as f64));
        }
        params.push(values);
    }
    model
        .set_params(params)
        .expect("layout derived from the same spec");
    Ok(model)
}
