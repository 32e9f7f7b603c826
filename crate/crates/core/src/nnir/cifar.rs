//! CIFAR-10 binary batches: each record is one label byte followed by a
//! 32x32 image stored as three 1024-byte planes (R, G, B).

use std::path::Path;

use super::{NnirError, Tensor, TensorShape};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecord {
    pub label: u8,
    /// HWC image scaled to [0, 1].
    pub image: Tensor,
}

impl CifarRecord {
    pub fn decode(rec: &[u8]) -> Self {
        assert_eq!(rec.len(), CIFAR_RECORD_BYTES);
        let planes = &rec[1..];
        let mut data = vec![0.0f32; 3 * 1024];
        for (c, plane) in planes.chunks_exact(1024).enumerate() {
            for (p, &v) in plane.iter().enumerate() {
                data[p * 3 + c] = f32::from(v) / 255.0;
            }
        }
        CifarRecord {
            label: rec[0],
            image: Tensor::new(TensorShape::hwc(32, 32, 3), data),
        }
    }
}

/// Reads up to `limit` records from a batch file.
pub fn read_cifar_batch(path: &Path, limit: Option<usize>) -> Result<Vec<CifarRecord>, NnirError> {
    let bytes = std::fs::read(path).map_err(|source| NnirError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(NnirError::Manifest(format!(
            "{}: length {} is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = limit.map_or(usize::MAX, |l| l);
    Ok(bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .take(n)
        .map(CifarRecord::decode)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_become_hwc() {
        let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
        rec[0] = 7;
        rec[1] = 255; // R at pixel 0
        rec[1 + 1024 + 1] = 51; // G at pixel 1
        rec[1 + 2048 + 1023] = 102; // B at last pixel
        let r = CifarRecord::decode(&rec);
        assert_eq!(r.label, 7);
        assert_eq!(r.image.at(0, 0, 0), 1.0);
        assert_eq!(r.image.at(0, 1, 1), 0.2);
        assert_eq!(r.image.at(31, 31, 2), 0.4);
    }

    #[test]
    fn batch_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, vec![1u8; CIFAR_RECORD_BYTES * 3]).unwrap();
        assert_eq!(read_cifar_batch(&p, None).unwrap().len(), 3);
        assert_eq!(read_cifar_batch(&p, Some(2)).unwrap().len(), 2);
        std::fs::write(&p, vec![1u8; CIFAR_RECORD_BYTES + 1]).unwrap();
        assert!(read_cifar_batch(&p, None).is_err());
    }
}
