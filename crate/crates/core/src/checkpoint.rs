//! Binary checkpoint format.
//!
//! All integers are u64 little-endian and all floats f64 little-endian:
//!
//! ```text
//! "WDNSE1"
//! sha256(architecture text)            32 bytes
//! architecture text                    length-prefixed, `ArchConfig::to_canonical`
//! epochs completed
//! manifest: count, then per parameter: name (length-prefixed), rank, dims
//! parameter values                     manifest order
//! batch-norm count, then per layer: channels, running mean, running var
//! velocity flag (one byte), then velocities in manifest order if set
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{build_network, ArchConfig, ArchError, Network};
use crate::train::SgdState;

pub const MAGIC: &[u8; 6] = b"WDNSE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("architecture digest mismatch")]
    DigestMismatch,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("checkpoint architecture is invalid: {0}")]
    Arch(#[from] ArchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub epochs_done: usize,
    pub velocities: Option<SgdState>,
}

/// SHA-256 of the canonical architecture text.
pub fn arch_digest(config: &ArchConfig) -> [u8; 32] {
    Sha256::digest(config.to_canonical().as_bytes()).into()
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

pub fn encode(net: &Network, epochs_done: usize, velocities: Option<&SgdState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&arch_digest(&net.config));
    put_bytes(&mut out, net.config.to_canonical().as_bytes());
    put_u64(&mut out, epochs_done as u64);
    let params = net.params();
    put_u64(&mut out, params.len() as u64);
    for (name, t) in &params {
        put_bytes(&mut out, name.as_bytes());
        put_u64(&mut out, t.dims().len() as u64);
        for &d in t.dims() {
            put_u64(&mut out, d as u64);
        }
    }
    for (_, t) in &params {
        put_f64s(&mut out, t.values());
    }
    let bns = net.batch_norms();
    put_u64(&mut out, bns.len() as u64);
    for bn in bns {
        put_u64(&mut out, bn.channels() as u64);
        put_f64s(&mut out, &bn.running_mean);
        put_f64s(&mut out, &bn.running_var);
    }
    match velocities {
        Some(state) => {
            out.push(1);
            for v in &state.velocities {
                put_f64s(&mut out, v);
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated(self.bytes.len()))
    }

    fn f64s_into(&mut self, dst: &mut [f64]) -> Result<(), CheckpointError> {
        let n = dst.len().checked_mul(8).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let raw = self.take(n)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let text_len = r.len()?;
    let text = r.take(text_len)?;
    if <[u8; 32]>::from(Sha256::digest(text)) != digest {
        return Err(CheckpointError::DigestMismatch);
    }
    let text = std::str::from_utf8(text).map_err(|_| CheckpointError::DigestMismatch)?;
    let config = ArchConfig::from_canonical(text)?;
    let mut network = build_network(&config, 0)?;
    let epochs_done = r.len()?;

    let expected: Vec<(String, Vec<usize>)> =
        network.params().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
    if r.len()? != expected.len() {
        return Err(CheckpointError::Manifest("parameter count differs from architecture".into()));
    }
    for (name, dims) in &expected {
        let len = r.len()?;
        let got = r.take(len)?;
        if got != name.as_bytes() {
            return Err(CheckpointError::Manifest(format!("expected {name}, found {}", String::from_utf8_lossy(got))));
        }
        let rank = r.len()?;
        if rank != dims.len() {
            return Err(CheckpointError::Manifest(format!("{name}: rank {rank}, expected {}", dims.len())));
        }
        for &d in dims {
            if r.len()? != d {
                return Err(CheckpointError::Manifest(format!("{name}: shape differs from {dims:?}")));
            }
        }
    }
    for t in network.params_mut() {
        r.f64s_into(t.values_mut())?;
    }
    let bn_count = r.len()?;
    let mut bns = network.batch_norms_mut();
    if bn_count != bns.len() {
        return Err(CheckpointError::Manifest(format!("{bn_count} batch-norms, expected {}", bns.len())));
    }
    for (i, bn) in bns.iter_mut().enumerate() {
        if r.len()? != bn.channels() {
            return Err(CheckpointError::Manifest(format!("batch-norm {i} channel count differs")));
        }
        r.f64s_into(&mut bn.running_mean)?;
        r.f64s_into(&mut bn.running_var)?;
    }
    let velocities = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut state = SgdState::for_network(&network);
            for v in &mut state.velocities {
                r.f64s_into(v)?;
            }
            Some(state)
        }
        flag => return Err(CheckpointError::Manifest(format!("bad velocity flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(Checkpoint { network, epochs_done, velocities })
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written checkpoint.
pub fn save(path: &Path, net: &Network, epochs_done: usize, velocities: Option<&SgdState>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(net, epochs_done, velocities)).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

/// Loads a checkpoint that must match `expected`.
pub fn load_for(path: &Path, expected: &ArchConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = load(path)?;
    if arch_digest(&ck.network.config) != arch_digest(expected) {
        return Err(CheckpointError::DigestMismatch);
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            num_blocks: 2,
            layers_per_block: 3,
            growth_rate: 2,
            window: 2,
            stem_channels: 3,
            num_classes: 4,
            input_height: 8,
            input_width: 8,
            ..ArchConfig::default()
        }
    }

    fn perturbed() -> (Network, SgdState) {
        let mut net = build_network(&tiny(), 7).unwrap();
        for (i, bn) in net.batch_norms_mut().into_iter().enumerate() {
            bn.running_mean.iter_mut().for_each(|m| *m = 0.1 * i as f64 + 1e-17);
            bn.running_var.iter_mut().for_each(|v| *v = 1.5 + i as f64);
        }
        let mut state = SgdState::for_network(&net);
        for (i, v) in state.velocities.iter_mut().enumerate() {
            v.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f64 * -1e-3);
        }
        (net, state)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (net, state) = perturbed();
        let bytes = encode(&net, 5, Some(&state));
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.epochs_done, 5);
        assert_eq!(ck.velocities.as_ref(), Some(&state));
        for ((_, a), (_, b)) in ck.network.params().iter().zip(net.params().iter()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in ck.network.batch_norms().iter().zip(net.batch_norms()) {
            assert_eq!(a.running_mean, b.running_mean);
            assert_eq!(a.running_var, b.running_var);
        }
        assert_eq!(encode(&ck.network, ck.epochs_done, ck.velocities.as_ref()), bytes);
    }

    #[test]
    fn without_velocities() {
        let (net, _) = perturbed();
        let bytes = encode(&net, 0, None);
        let ck = decode(&bytes).unwrap();
        assert!(ck.velocities.is_none());
        assert_eq!(encode(&ck.network, 0, None), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (net, _) = perturbed();
        let bytes = encode(&net, 1, None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(decode(&bad), Err(CheckpointError::DigestMismatch)));
        // flip a byte inside the architecture text
        let mut bad = bytes.clone();
        bad[6 + 32 + 8 + 10] ^= 1;
        assert!(matches!(decode(&bad), Err(CheckpointError::DigestMismatch)));
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(CheckpointError::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::Trailing(1))));
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (net, _) = perturbed();
        save(&path, &net, 2, None).unwrap();
        assert!(load_for(&path, &tiny()).is_ok());
        assert!(matches!(load_for(&path, &tiny().with_window(3)), Err(CheckpointError::DigestMismatch)));
        assert!(!dir.path().join("ck.bin.tmp").exists());
    }
}
