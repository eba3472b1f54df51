//! Checkpoint container.
//!
//! Layout: magic `LCSSL1\0`, a u32-LE header length, a UTF-8 JSON header
//! (format version, train config, step, named parameter manifest with
//! shapes and byte offsets), raw little-endian f32 parameter blocks in
//! manifest order, and finally a 64-bit FNV-1a digest of everything prior.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};
use crate::Real;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 7] = b"LCSSL1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the parameter block region.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub manifest: Vec<ManifestEntry>,
}

fn fnv1a64(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;

struct DigestWriter<W: Write> {
    inner: W,
    digest: u64,
}

impl<W: Write> Write for DigestWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.digest = fnv1a64(self.digest, &buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// The section prefixes used in the manifest, in file order.
const SECTIONS: [&str; 3] = ["online", "target", "velocity"];

/// Persist the full training state (parameters, target, optimizer slots,
/// step, config) to `path`.
pub fn save_trainer<T: Real, P: AsRef<Path>>(tr: &Trainer<T>, path: P) -> Result<()> {
    let sections: [(&str, &[Tensor<T>]); 3] = [
        (SECTIONS[0], &tr.pair.online.values),
        (SECTIONS[1], &tr.pair.target.values),
        (SECTIONS[2], &tr.velocity),
    ];
    let names: [&[String]; 3] = [
        &tr.pair.online.names,
        &tr.pair.target.names,
        &tr.pair.online.names, // velocity slots mirror the online layout
    ];
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for ((prefix, tensors), names) in sections.iter().zip(names) {
        for (t, n) in tensors.iter().zip(names) {
            manifest.push(ManifestEntry {
                name: format!("{prefix}/{n}"),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: tr.cfg.clone(),
        step: tr.step,
        manifest,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;

    let file = File::create(path.as_ref())?;
    let mut w = DigestWriter {
        inner: BufWriter::new(file),
        digest: FNV_OFFSET_BASIS,
    };
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, tensors) in &sections {
        for t in tensors.iter() {
            let mut buf = Vec::with_capacity(4 * t.len());
            for &v in &t.data {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    let digest = w.digest;
    w.inner.write_all(&digest.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

fn read_exact_digesting<R: Read>(r: &mut R, buf: &mut [u8], digest: &mut u64) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    *digest = fnv1a64(*digest, buf);
    Ok(())
}

/// Read just the header (config, step, manifest) without validating the
/// parameter payload digest.
pub fn read_header<P: AsRef<Path>>(path: P) -> Result<Header> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut digest = FNV_OFFSET_BASIS;
    let mut magic = [0u8; 7];
    read_exact_digesting(&mut r, &mut magic, &mut digest)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    read_exact_digesting(&mut r, &mut len, &mut digest)?;
    let mut hdr = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_digesting(&mut r, &mut hdr, &mut digest)?;
    let header: Header = serde_json::from_slice(&hdr)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, expected {}",
            header.version, FORMAT_VERSION
        )));
    }
    Ok(header)
}

/// Restore a full trainer from a checkpoint file.
pub fn load_trainer<T: Real, P: AsRef<Path>>(path: P) -> Result<Trainer<T>> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut digest = FNV_OFFSET_BASIS;
    let mut magic = [0u8; 7];
    read_exact_digesting(&mut r, &mut magic, &mut digest)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    read_exact_digesting(&mut r, &mut len, &mut digest)?;
    let mut hdr = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_digesting(&mut r, &mut hdr, &mut digest)?;
    let header: Header = serde_json::from_slice(&hdr)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, expected {}",
            header.version, FORMAT_VERSION
        )));
    }

    let mut tr = Trainer::<T>::new(header.config.clone())?;
    tr.step = header.step;

    // expected manifest from the freshly built layout
    let mut expected = Vec::new();
    for (si, names) in [
        &tr.pair.online.names,
        &tr.pair.target.names,
        &tr.pair.online.names,
    ]
    .iter()
    .enumerate()
    {
        for n in names.iter() {
            expected.push(format!("{}/{n}", SECTIONS[si]));
        }
    }
    if header.manifest.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} entries, layout expects {}",
            header.manifest.len(),
            expected.len()
        )));
    }

    let mut entry_idx = 0;
    {
        let mut sections: [&mut Vec<Tensor<T>>; 3] = [
            &mut tr.pair.online.values,
            &mut tr.pair.target.values,
            &mut tr.velocity,
        ];
        for tensors in sections.iter_mut() {
            for t in tensors.iter_mut() {
                let entry = &header.manifest[entry_idx];
                if entry.name != expected[entry_idx] {
                    return Err(Error::Checkpoint(format!(
                        "manifest entry {} is {:?}, expected {:?}",
                        entry_idx, entry.name, expected[entry_idx]
                    )));
                }
                if entry.shape != t.shape {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {:?}: {:?} vs {:?}",
                        entry.name, entry.shape, t.shape
                    )));
                }
                let mut buf = vec![0u8; 4 * t.len()];
                read_exact_digesting(&mut r, &mut buf, &mut digest)?;
                for (v, c) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
                    *v = T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                }
                entry_idx += 1;
            }
        }
    }

    let mut tail = [0u8; 8];
    r.read_exact(&mut tail)
        .map_err(|_| Error::Checkpoint("truncated file (missing digest)".into()))?;
    let stored = u64::from_le_bytes(tail);
    if stored != digest {
        return Err(Error::Checkpoint(format!(
            "digest mismatch: stored {stored:#018x}, computed {digest:#018x}"
        )));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).unwrap_or(0) != 0 {
        return Err(Error::Checkpoint("trailing bytes after digest".into()));
    }
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.steps = 4;
        cfg.batch_size = 2;
        cfg.model = ModelConfig {
            image_size: (16, 16),
            stage_channels: vec![4, 6],
            stage_downsample: vec![2, 2],
            proj_hidden: 8,
            proj_dim: 4,
            pred_hidden: 8,
            local_hidden: 8,
            local_dim: 4,
            ..ModelConfig::default()
        };
        cfg.aug.src_size = (16, 16);
        cfg.aug.out_size = (16, 16);
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut tr = Trainer::<f32>::new(tiny_cfg()).unwrap();
        tr.step = 3;
        tr.velocity[0].data[0] = 0.125;
        save_trainer(&tr, &path).unwrap();
        let tr2 = load_trainer::<f32, _>(&path).unwrap();
        assert_eq!(tr2.step, 3);
        assert_eq!(tr.pair.online.values, tr2.pair.online.values);
        assert_eq!(tr.pair.target.values, tr2.pair.target.values);
        assert_eq!(tr.velocity, tr2.velocity);
        assert_eq!(tr.cfg, tr2.cfg);

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("b.ckpt");
        save_trainer(&tr2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let tr = Trainer::<f32>::new(tiny_cfg()).unwrap();
        save_trainer(&tr, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 12]).unwrap();
        let err = load_trainer::<f32, _>(&cut).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &flipped).unwrap();
        let err = load_trainer::<f32, _>(&bad).unwrap_err().to_string();
        assert!(err.contains("digest mismatch") || err.contains("mismatch"), "{err}");

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let wm = dir.path().join("wm.ckpt");
        std::fs::write(&wm, &wrong_magic).unwrap();
        let err = load_trainer::<f32, _>(&wm).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let tr = Trainer::<f32>::new(tiny_cfg()).unwrap();
        save_trainer(&tr, &path).unwrap();
        let mut header = read_header(&path).unwrap();
        assert_eq!(header.version, FORMAT_VERSION);
        header.version = 99;
        // rebuild the file with the bumped version and a fresh digest
        let hdr = serde_json::to_vec(&header).unwrap();
        let orig = std::fs::read(&path).unwrap();
        let old_hlen = u32::from_le_bytes(orig[7..11].try_into().unwrap()) as usize;
        let payload = &orig[11 + old_hlen..orig.len() - 8];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        out.extend_from_slice(&hdr);
        out.extend_from_slice(payload);
        let d = fnv1a64(FNV_OFFSET_BASIS, &out);
        out.extend_from_slice(&d.to_le_bytes());
        let vp = dir.path().join("v99.ckpt");
        std::fs::write(&vp, &out).unwrap();
        let err = load_trainer::<f32, _>(&vp).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn fnv_reference_vector() {
        // well-known FNV-1a 64 test vectors
        assert_eq!(fnv1a64(FNV_OFFSET_BASIS, b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(FNV_OFFSET_BASIS, b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(FNV_OFFSET_BASIS, b"foobar"), 0x85944171f73967e8);
    }
}
