//! Flat parameter vectors and their on-disk form.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EDLBCKPT"
//! version  u32      1
//! arch     u32 length + UTF-8 bytes
//! entries  u32 count, then per entry:
//!            layer u32, kind u8 (0 param, 1 buffer),
//!            name u32 length + UTF-8, ndim u32, dims u64 × ndim, offset u64
//! values   u64 count, then f64 × count
//! ```
//!
//! A `<file>.meta` sidecar holds human-readable `key=value` metadata.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Network, BUFFER_SLOTS, PARAM_SLOTS};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const MAGIC: &[u8; 8] = b"EDLBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: EntryKind,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slot name after the `layers.{i}.` prefix.
    pub fn slot(&self) -> &str {
        self.name.rsplit('.').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_id: String,
    pub layout: Vec<LayoutEntry>,
    pub flat: Vec<f64>,
}

impl Checkpoint {
    /// Builds a checkpoint from named tensors, in the order given.
    pub fn from_entries(arch_id: impl Into<String>, entries: Vec<(usize, String, EntryKind, Tensor)>) -> Self {
        let mut layout = Vec::with_capacity(entries.len());
        let mut flat = Vec::new();
        for (layer, name, kind, t) in entries {
            layout.push(LayoutEntry {
                layer,
                name,
                shape: t.shape().to_vec(),
                offset: flat.len(),
                kind,
            });
            flat.extend_from_slice(t.data());
        }
        Self {
            arch_id: arch_id.into(),
            layout,
            flat,
        }
    }

    /// Every parameter and frozen buffer of `net` in canonical order.
    pub fn capture(net: &Network) -> Self {
        let mut entries = Vec::new();
        for i in net.parameterized_indices() {
            let layer = &net.layers[i];
            for slot in PARAM_SLOTS {
                let t = layer.param(slot).expect("parameterized layer has weight and bias");
                entries.push((i, format!("layers.{i}.{slot}"), EntryKind::Param, t.clone()));
            }
            for slot in BUFFER_SLOTS {
                if let Some(t) = layer.param(slot) {
                    entries.push((i, format!("layers.{i}.{slot}"), EntryKind::Buffer, t.clone()));
                }
            }
        }
        Self::from_entries(net.arch_id(), entries)
    }

    pub fn same_layout(&self, other: &Checkpoint) -> bool {
        self.arch_id == other.arch_id && self.layout == other.layout
    }

    pub fn entry(&self, name: &str) -> Option<Tensor> {
        let e = self.layout.iter().find(|e| e.name == name)?;
        Tensor::new(e.shape.clone(), self.flat[e.offset..e.offset + e.len()].to_vec()).ok()
    }

    /// Writes every entry back into `net`, which must have the same layout.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        let reference = Checkpoint::capture(net);
        if !self.same_layout(&reference) {
            return Err(Error::contract(format!(
                "checkpoint layout ({}) does not match network ({})",
                self.arch_id,
                net.arch_id()
            )));
        }
        for e in &self.layout {
            let t = Tensor::new(e.shape.clone(), self.flat[e.offset..e.offset + e.len()].to_vec())?;
            net.set_param(e.layer, e.slot(), t)?;
        }
        Ok(())
    }

    /// A copy of `template` carrying this checkpoint's values.
    pub fn instantiate(&self, template: &Network) -> Result<Network> {
        let mut net = template.clone();
        self.restore(&mut net)?;
        Ok(net)
    }

    /// Layer indices whose values differ bitwise between two checkpoints.
    pub fn differing_layers(&self, other: &Checkpoint) -> Result<Vec<usize>> {
        if !self.same_layout(other) {
            return Err(Error::contract("checkpoint layouts differ"));
        }
        let mut out: Vec<usize> = Vec::new();
        for e in &self.layout {
            let r = e.offset..e.offset + e.len();
            let same = self.flat[r.clone()]
                .iter()
                .zip(&other.flat[r])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same && out.last() != Some(&e.layer) {
                out.push(e.layer);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.flat.len() * 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut b, &self.arch_id);
        b.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for e in &self.layout {
            b.extend_from_slice(&(e.layer as u32).to_le_bytes());
            b.push(match e.kind {
                EntryKind::Param => 0,
                EntryKind::Buffer => 1,
            });
            put_str(&mut b, &e.name);
            b.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            b.extend_from_slice(&(e.offset as u64).to_le_bytes());
        }
        b.extend_from_slice(&(self.flat.len() as u64).to_le_bytes());
        for v in &self.flat {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch_id = r.string()?;
        let n = r.u32()? as usize;
        let mut layout = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = r.u32()? as usize;
            let kind = match r.take(1)?[0] {
                0 => EntryKind::Param,
                1 => EntryKind::Buffer,
                k => return Err(Error::Format(format!("unknown entry kind {k}"))),
            };
            let name = r.string()?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            layout.push(LayoutEntry {
                layer,
                name,
                shape,
                offset,
                kind,
            });
        }
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        for e in &layout {
            if e.offset + e.len() > flat.len() {
                return Err(Error::Format(format!("entry {} out of bounds", e.name)));
            }
        }
        Ok(Self { arch_id, layout, flat })
    }

    /// Writes the binary file and its `.meta` sidecar.
    pub fn write(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let mut text = format!(
            "format_version={FORMAT_VERSION}\narch={}\nentries={}\nvalues={}\n",
            self.arch_id,
            self.layout.len(),
            self.flat.len()
        );
        for (k, v) in meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        let side = sidecar_path(path);
        fs::write(&side, text).map_err(|e| Error::io(side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Parses a `key=value` sidecar.
pub fn read_sidecar(path: &Path) -> Result<Vec<(String, String)>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

/// `(1 − α)·a + α·b`, elementwise.
///
/// Coordinates on which `a` and `b` agree are copied unchanged, so
/// untouched layers and frozen buffers stay bit-identical for every α.
/// α outside `[0, 1]` is allowed (extrapolation) but logged.
pub fn interpolate(a: &Checkpoint, b: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !a.same_layout(b) {
        return Err(Error::contract(format!(
            "cannot interpolate checkpoints with different layouts ({} vs {})",
            a.arch_id, b.arch_id
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        log::warn!("interpolation coefficient {alpha} outside [0, 1]");
    }
    let flat = a
        .flat
        .iter()
        .zip(&b.flat)
        .map(|(&x, &y)| {
            if x.to_bits() == y.to_bits() {
                x
            } else {
                (1.0 - alpha) * x + alpha * y
            }
        })
        .collect();
    Ok(Checkpoint {
        arch_id: a.arch_id.clone(),
        layout: a.layout.clone(),
        flat,
    })
}
