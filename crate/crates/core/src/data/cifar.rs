use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Labels};

/// One label byte followed by a 3 x 32 x 32 planar RGB image.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Load and concatenate CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            let full = bytes.len() / CIFAR_RECORD_BYTES;
            return Err(Error::Format {
                file: path.clone(),
                offset: (full * CIFAR_RECORD_BYTES) as u64,
                msg: format!(
                    "truncated record {full}: {} of {CIFAR_RECORD_BYTES} bytes",
                    bytes.len() % CIFAR_RECORD_BYTES
                ),
            });
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Data(format!(
                    "{}: record {i}: label {label} >= {CIFAR_CLASSES} classes",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        Labels::Classes(labels),
        CIFAR_CLASSES,
    )
}
