//! Flat binary checkpoint container.
//!
//! Layout: magic `GPITCKPT`, one version byte, then for each named
//! parameter: name length (u64 LE), UTF-8 name, rank (u64 LE), dims
//! (u64 LE each), data (f64 LE each). Round-trips are bit-exact.
//!
//! String metadata rides in the same container as tensors named
//! `__meta.<key>` whose data holds the UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPITCKPT";
const VERSION: u8 = 1;
const META_PREFIX: &str = "__meta.";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    w.write_all(&(t.rank() as u64).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

/// Write parameters and metadata. Parameter order is preserved; metadata
/// entries follow the parameters.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&[VERSION]).map_err(io_err)?;
    for (name, t) in params.entries() {
        assert!(
            !name.starts_with(META_PREFIX),
            "parameter name collides with metadata prefix: {name}"
        );
        write_entry(&mut w, name, t)?;
    }
    for (key, value) in meta {
        let bytes: Vec<f64> = value.bytes().map(|b| b as f64).collect();
        let t = Tensor::from_vec(bytes);
        write_entry(&mut w, &format!("{META_PREFIX}{key}"), &t)?;
    }
    w.flush().map_err(io_err)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..]).map_err(io_err)?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(TensorError::Checkpoint("truncated entry".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    if !read_exact_or_eof(r, &mut b)? {
        return Err(TensorError::Checkpoint("truncated entry".into()));
    }
    Ok(u64::from_le_bytes(b))
}

/// Read a checkpoint back into parameters and string metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, Vec<(String, String)>)> {
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    if !read_exact_or_eof(&mut r, &mut magic)? || &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut version = [0u8; 1];
    if !read_exact_or_eof(&mut r, &mut version)? || version[0] != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {}",
            version[0]
        )));
    }
    let mut params = ParamSet::new();
    let mut meta = Vec::new();
    loop {
        let mut len_bytes = [0u8; 8];
        if !read_exact_or_eof(&mut r, &mut len_bytes)? {
            break;
        }
        let name_len = u64::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        if !read_exact_or_eof(&mut r, &mut name_bytes)? {
            return Err(TensorError::Checkpoint("truncated name".into()));
        }
        let name = String::from_utf8(name_bytes)
            .map_err(|e| TensorError::Checkpoint(format!("bad name: {e}")))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            if !read_exact_or_eof(&mut r, &mut b)? {
                return Err(TensorError::Checkpoint("truncated data".into()));
            }
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(shape, data)?;
        if let Some(key) = name.strip_prefix(META_PREFIX) {
            let bytes: Vec<u8> = tensor.data().iter().map(|&v| v as u8).collect();
            let value = String::from_utf8(bytes)
                .map_err(|e| TensorError::Checkpoint(format!("bad metadata: {e}")))?;
            meta.push((key.to_string(), value));
        } else {
            params.push(name, tensor);
        }
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("gpitlab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let mut ps = ParamSet::new();
        ps.push("a.w", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300, -1e-300, 0.125]).unwrap());
        ps.push("b", Tensor::scalar(42.0));
        let meta = vec![("config_hash".to_string(), "abc123".to_string())];
        save_checkpoint(&path, &ps, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ps);
        assert_eq!(loaded_meta, meta);

        // a second save produces identical bytes
        let path2 = dir.join("rt2.ckpt");
        save_checkpoint(&path2, &ps, &meta).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("gpitlab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
