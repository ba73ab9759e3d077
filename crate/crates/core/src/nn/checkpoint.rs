//! Weight checkpoint container.
//!
//! ```text
//! magic    b"HSDW"
//! version  u16
//! header   u32 length + JSON {"descriptor": .., "role": ..}
//! count    u32
//! tensor*  u16 name length, name, u8 rank, u32 dims.., f32 data..
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::descriptor::ArchitectureDescriptor;
use super::network::{DenoiserNetwork, ModelRole, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HSDW";
pub const VERSION: u16 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    descriptor: ArchitectureDescriptor,
    role: ModelRole,
}

pub fn write_checkpoint<S: Scalar, W: Write>(net: &DenoiserNetwork<S>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        descriptor: net.descriptor.clone(),
        role: net.role,
    })?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let tensors = net.weights.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.iter() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<DenoiserNetwork<S>> {
    let magic: [u8; 4] = read_exact(&mut input)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(&mut input)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(read_exact(&mut input)?) as usize;
    if len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header length {len} exceeds {MAX_HEADER}")));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.descriptor.validate()?;
    let mut weights = Weights::<S>::zeros(&header.descriptor);
    let count = u32::from_le_bytes(read_exact(&mut input)?) as usize;
    let slots = weights.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, descriptor needs {}",
            slots.len()
        )));
    }
    for (expected, mut slot) in slots {
        let name_len = u16::from_le_bytes(read_exact(&mut input)?) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let [rank] = read_exact::<1, _>(&mut input)?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(&mut input)?) as usize);
        }
        if dims != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {dims:?}, descriptor implies {:?}",
                slot.shape()
            )));
        }
        let mut buf = vec![0u8; slot.len() * 4];
        input.read_exact(&mut buf)?;
        for (dst, chunk) in slot.iter_mut().zip(buf.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            *dst = S::lit(v as f64);
        }
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    DenoiserNetwork::from_weights(header.descriptor, weights, header.role)
}

pub fn save<S: Scalar>(net: &DenoiserNetwork<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<DenoiserNetwork<S>> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
