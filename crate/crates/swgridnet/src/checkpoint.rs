//! Checkpoints: the complete state of a network (weights plus running
//! statistics) in one self-describing binary file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SWGD"
//! version    u32      currently 1
//! digest     32 bytes sha-256 of the embedded configuration text
//! cfg_len    u32
//! cfg        cfg_len bytes, the network configuration in canonical form
//! count      u32      number of state entries
//! entry*     name_len u32, name bytes,
//!            rank u32, dims u32 x rank,
//!            values f32 x product(dims)
//! ```
//!
//! Entries appear in the network's deterministic state-walk order and are
//! verified against it on load, so a file cannot silently rebind tensors.
//! The embedded configuration makes a checkpoint self-sufficient: loading
//! reconstructs the architecture without any side channel. Values are
//! stored as `f32` regardless of the network's scalar type.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::SwGridNetwork;
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"SWGD";
const VERSION: u32 = 1;

/// Writes the complete state of `net` to `path` (atomically: the file
/// appears only once fully written).
pub fn save<S: Scalar>(net: &SwGridNetwork<S>, path: &Path) -> Result<()> {
    let cfg = net.config().canonical_text();
    let digest = Sha256::digest(cfg.as_bytes());
    let entries = net.state_entries();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&digest);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for entry in &entries {
        buf.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        let dims = entry.tensor.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.tensor.data().iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Sequential reader with offset-carrying errors.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Data(format!(
                "{} truncated: {what} needs {n} bytes at offset {}, {} remain",
                self.path.display(),
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint and reconstructs the network it describes. The
/// embedded configuration must hash to the stored digest, and every entry
/// must match the freshly built network's state walk in name, shape, and
/// order.
pub fn load(path: &Path) -> Result<SwGridNetwork<f32>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { bytes: &bytes, at: 0, path };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{} has checkpoint version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let stored_digest = r.take(32, "config digest")?.to_vec();
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "configuration")?;
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Data(format!("{} embeds non-UTF-8 configuration", path.display())))?;
    let fresh_digest = Sha256::digest(cfg_text.as_bytes());
    if fresh_digest.as_slice() != stored_digest.as_slice() {
        return Err(Error::Data(format!(
            "{} configuration digest mismatch — file corrupt or tampered",
            path.display()
        )));
    }
    let network_config = config::network_config_from_text(cfg_text)?;
    let net = SwGridNetwork::<f32>::new(network_config)?;

    let expected = net.state_entries();
    let count = r.u32("entry count")? as usize;
    if count != expected.len() {
        return Err(Error::Data(format!(
            "{} holds {count} entries, the architecture needs {}",
            path.display(),
            expected.len()
        )));
    }
    for want in &expected {
        let name_len = r.u32("entry name length")? as usize;
        let name_bytes = r.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Data(format!("{} has a non-UTF-8 entry name", path.display())))?;
        if name != want.name {
            return Err(Error::Data(format!(
                "{} entry `{name}` arrived where `{}` was expected",
                path.display(),
                want.name
            )));
        }
        let rank = r.u32("entry rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("entry dimension")? as usize);
        }
        if dims != want.tensor.dims() {
            return Err(Error::Data(format!(
                "{} entry `{name}` has shape {dims:?}, expected {:?}",
                path.display(),
                want.tensor.dims()
            )));
        }
        let raw = r.take(want.tensor.numel() * 4, "entry values")?;
        let mut data = want.tensor.data_mut();
        for (v, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Data(format!(
            "{} has {} trailing bytes after the last entry",
            path.display(),
            bytes.len() - r.at
        )));
    }
    Ok(net)
}
