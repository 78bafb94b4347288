//! Parameter checkpoints: binary named-tensor format plus a text summary.

use std::io::Write as _;
use std::path::Path;

use super::{AutogradError, TensorData};

const MAGIC: &[u8; 4] = b"CCAW";
const VERSION: u32 = 1;

/// Write named f32 tensors. Layout: magic, version, tensor count, then per
/// tensor: name length, name bytes, ndim, dims, little-endian f32 data.
pub fn save(path: &Path, tensors: &[(String, TensorData<f32>)]) -> Result<(), AutogradError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, TensorData<f32>)>, AutogradError> {
    let data = std::fs::read(path)?;
    if data.len() < 12 || &data[0..4] != MAGIC {
        return Err(AutogradError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(AutogradError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let mut off = 12usize;
    let mut take = |n: usize| -> Result<&[u8], AutogradError> {
        if off + n > data.len() {
            return Err(AutogradError::Format("truncated checkpoint".into()));
        }
        let s = &data[off..off + n];
        off += n;
        Ok(s)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| AutogradError::Format("bad tensor name".into()))?;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f32::from_le_bytes(take(4)?.try_into().unwrap()));
        }
        out.push((name, TensorData { shape, values }));
    }
    Ok(out)
}

/// Human-readable companion: one line per tensor with its shape and size.
pub fn write_summary(
    path: &Path,
    tensors: &[(String, TensorData<f32>)],
) -> Result<(), AutogradError> {
    let mut f = std::fs::File::create(path)?;
    let mut total = 0usize;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "{name} {} {}", dims.join("x"), t.numel())?;
        total += t.numel();
    }
    writeln!(f, "total_parameters {total}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let tensors = vec![
            (
                "stem.w".to_string(),
                TensorData::from_values(&[2, 3], vec![1.5f32, -0.25, 3.75, 0.0, -1.0, 2.5]),
            ),
            (
                "stem.b".to_string(),
                TensorData::from_values(&[2], vec![0.1f32, -0.2]),
            ),
        ];
        let dir = std::env::temp_dir().join("ccadepth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ccaw");
        save(&path, &tensors).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            for (a, b) in ta.values.iter().zip(&tb.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        write_summary(&dir.join("model.txt"), &tensors).unwrap();
        let text = std::fs::read_to_string(dir.join("model.txt")).unwrap();
        assert!(text.contains("stem.w 2x3 6"));
        assert!(text.contains("total_parameters 8"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("ccadepth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ccaw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load(&path), Err(AutogradError::Format(_))));
    }
}
