//! Binary checkpoints of a single backbone network.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDAD"  u32 version  u8 kind (0 = AE, 1 = AEU)
//! config: u32 input_size, kernel, stride, padding,
//!         u32 count + u32 dims for enc_channels, fc_dims, dec_channels,
//!         u64 init seed
//! records until end of file:
//!         u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 payload
//! ```
//!
//! Batch-norm running statistics are ordinary records named
//! `<layer>.running_mean` / `<layer>.running_var`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{build_backbone, BackboneConfig, BackboneKind, BackboneNet};
use crate::error::{DdadError, Result};

pub const MAGIC: &[u8; 4] = b"DDAD";
pub const FORMAT_VERSION: u32 = 1;

fn kind_byte(kind: BackboneKind) -> u8 {
    match kind {
        BackboneKind::Ae => 0,
        BackboneKind::Aeu => 1,
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DdadError::Config(format!("{what} {v} does not fit in u32")))
}

/// Serializes `net` into checkpoint bytes.
pub fn encode_checkpoint(net: &BackboneNet<f32>) -> Result<Vec<u8>> {
    let c = net.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_byte(c.kind));
    for v in [c.input_size, c.kernel, c.stride, c.padding] {
        out.extend_from_slice(&u32_of(v, "config value")?.to_le_bytes());
    }
    for list in [&c.enc_channels, &c.fc_dims, &c.dec_channels] {
        out.extend_from_slice(&u32_of(list.len(), "list length")?.to_le_bytes());
        for &v in list.iter() {
            out.extend_from_slice(&u32_of(v, "config value")?.to_le_bytes());
        }
    }
    out.extend_from_slice(&c.seed.to_le_bytes());

    let mut record = |name: &str, dims: &[usize], values: &[f32]| -> Result<()> {
        let len = u16::try_from(name.len()).map_err(|_| DdadError::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(dims.len()).map_err(|_| DdadError::Config(format!("{name}: rank too large")))?);
        for &d in dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    };
    for p in net.parameters() {
        record(&p.name, p.value.shape(), &p.value.data())?;
    }
    for (name, values) in net.buffers() {
        record(&name, &[values.len()], &values)?;
    }
    Ok(out)
}

pub fn save_checkpoint(net: &BackboneNet<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(DdadError::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn list(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        if n > 64 {
            return self.fail(format!("{what} has implausible length {n}"));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses checkpoint bytes. With `expected` set, a checkpoint of another
/// backbone kind is rejected with [`DdadError::KindMismatch`].
pub fn decode_checkpoint(bytes: &[u8], expected: Option<BackboneKind>) -> Result<BackboneNet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a DDAD checkpoint");
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        r.pos = version_at;
        return r.fail(format!("unsupported format version {version}"));
    }
    let kind = match r.u8("kind")? {
        0 => BackboneKind::Ae,
        1 => BackboneKind::Aeu,
        other => {
            r.pos -= 1;
            return r.fail(format!("unknown backbone kind byte {other}"));
        }
    };
    if let Some(expected) = expected {
        if expected != kind {
            return Err(DdadError::KindMismatch { expected: expected.to_string(), found: kind.to_string() });
        }
    }
    let config_at = r.pos;
    let config = BackboneConfig {
        kind,
        input_size: r.u32("config")?,
        kernel: r.u32("config")?,
        stride: r.u32("config")?,
        padding: r.u32("config")?,
        enc_channels: r.list("enc_channels")?,
        fc_dims: r.list("fc_dims")?,
        dec_channels: r.list("dec_channels")?,
        seed: r.u64("seed")?,
    };
    let mut net = build_backbone::<f32>(&config)
        .map_err(|e| DdadError::Format { offset: config_at, message: format!("invalid config block: {e}") })?;

    let mut wanted: HashSet<String> = net.parameters().into_iter().map(|p| p.name).collect();
    wanted.extend(net.buffers().into_iter().map(|(n, _)| n));
    while !r.done() {
        let record_at = r.pos;
        let len = r.u16("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| DdadError::Format { offset: record_at + 2, message: "record name is not UTF-8".into() })?
            .to_owned();
        let rank = r.u8("record rank")? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32("record dims")).collect::<Result<_>>()?;
        let Some(bytes_len) = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d)) else {
            return r.fail(format!("{name}: dims {dims:?} overflow"));
        };
        let payload = r.take(bytes_len, &format!("payload of {name}"))?;
        if !wanted.remove(&name) {
            r.pos = record_at;
            return r.fail(format!("unexpected or duplicate record '{name}'"));
        }
        let values: Vec<f32> =
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        net.set_named(&name, &dims, &values)
            .map_err(|e| DdadError::Format { offset: record_at, message: e.to_string() })?;
    }
    if let Some(missing) = wanted.iter().min() {
        return r.fail(format!("missing record '{missing}' ({} absent)", wanted.len()));
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path, expected: Option<BackboneKind>) -> Result<BackboneNet<f32>> {
    decode_checkpoint(&fs::read(path)?, expected)
}
