//! Binary checkpoint: `"BTTA" | version u32 | count u32 | tensors… |
//! ["BUFR" | count u32 | tensors…] | sha256`.
//!
//! Each tensor entry is `name_len u16 | name | dtype u8 | rank u8 | dims u32… |
//! payload`, all little-endian. Normalization state, the standardizer and
//! the architecture are stored as ordinary `f64` tensors under reserved
//! names. The optional `BUFR` section holds an attached buffer bank.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::buffer::{BufferBank, BufferSpec, Design, Placement, Selection, PARAM_PREFIX};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig, Standardizer};
use crate::norm_stats::NormKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTTA";
pub const VERSION: u32 = 1;
pub const BUFFER_TAG: &[u8; 4] = b"BUFR";
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

const META_CONFIG: &str = "meta.config";
const META_NORM: &str = "meta.norm";
const META_STANDARDIZER: &str = "meta.standardizer";
const META_BUFFER: &str = "meta.buffer";
const NORM_FIELDS: [&str; 6] = ["gamma", "beta", "mu_s", "var_s", "mu_run", "var_run"];

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty vector")
}

fn table(model: &Backbone) -> Vec<(String, Tensor)> {
    let c = &model.config;
    let (kind, groups) = match c.norm {
        NormKind::Batch => (0.0, 0.0),
        NormKind::Group { groups } => (1.0, groups as f64),
    };
    let mut out = vec![
        (
            META_CONFIG.to_string(),
            vector(&[
                c.stages as f64,
                c.blocks_per_stage as f64,
                c.base_channels as f64,
                c.num_classes as f64,
                kind,
                groups,
                c.input_shape[0] as f64,
                c.input_shape[1] as f64,
                c.input_shape[2] as f64,
            ]),
        ),
        (
            META_NORM.to_string(),
            vector(&[model.norms.momentum, model.norms.eps]),
        ),
        (
            META_STANDARDIZER.to_string(),
            vector(&[model.standardizer.mean, model.standardizer.std].concat()),
        ),
    ];
    for (name, p) in model.params.iter() {
        out.push((name.to_string(), p.value.clone()));
    }
    for l in &model.norms.layers {
        let fields = [
            l.gamma.data(),
            l.beta.data(),
            &l.mu_s,
            &l.var_s,
            &l.mu_run,
            &l.var_run,
        ];
        for (field, values) in NORM_FIELDS.iter().zip(fields) {
            out.push((format!("{}.{field}", l.name), vector(values)));
        }
    }
    out
}

fn write_entries(buf: &mut Vec<u8>, entries: &[(String, Tensor)]) {
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&t.to_le_bytes());
    }
}

fn buffer_table(bank: &BufferBank) -> Vec<(String, Tensor)> {
    let spec = &bank.spec;
    let mask = match &spec.selection {
        Selection::Stages(s) => s.iter().map(|&i| (1u32 << i) as f64).sum(),
        Selection::Points(_) => 0.0,
    };
    let placement = Placement::ALL.iter().position(|&p| p == spec.placement).expect("listed");
    let mut out = vec![(
        META_BUFFER.to_string(),
        vector(&[
            spec.design.number() as f64,
            placement as f64,
            spec.alpha_init,
            spec.beta_init,
            spec.trainable_scales as u8 as f64,
            mask,
        ]),
    )];
    for b in &bank.buffers {
        for (name, p) in b.params.iter() {
            out.push((name.to_string(), p.value.clone()));
        }
    }
    out
}

/// Serializes the backbone (θ, normalization state, standardizer) and, when
/// one is attached, the buffer bank.
pub fn encode(model: &Backbone) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_entries(&mut buf, &table(model));
    if let Some(bank) = model.bank() {
        buf.extend_from_slice(BUFFER_TAG);
        write_entries(&mut buf, &buffer_table(bank));
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

type Entries = Vec<(String, Tensor)>;

fn read_entries(bytes: &[u8]) -> Result<(Entries, Option<Entries>)> {
    if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing BTTA header".into()));
    }
    let body = &bytes[..bytes.len() - 32];
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
        return Err(Error::CorruptCheckpoint("content hash mismatch".into()));
    }
    let main = read_table(&mut r)?;
    let buffers = if r.pos < body.len() {
        if r.take(4)? != BUFFER_TAG {
            return Err(Error::CorruptCheckpoint("unknown section after tensor table".into()));
        }
        Some(read_table(&mut r)?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensor table".into()));
    }
    Ok((main, buffers))
}

fn read_table(r: &mut Reader<'_>) -> Result<Entries> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::CorruptCheckpoint(format!("{name}: unknown dtype {other}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn decode_bank(model: &Backbone, entries: &Entries) -> Result<BufferBank> {
    let bad = |m: String| Error::CorruptCheckpoint(format!("buffer section: {m}"));
    let (meta_name, meta) = entries.first().ok_or_else(|| bad("empty".into()))?;
    let meta = meta.data();
    if meta_name != META_BUFFER || meta.len() != 6 {
        return Err(bad("malformed header".into()));
    }
    let design = Design::ALL
        .into_iter()
        .find(|d| d.number() as f64 == meta[0])
        .ok_or_else(|| bad(format!("design {}", meta[0])))?;
    let placement = *Placement::ALL
        .get(meta[1] as usize)
        .ok_or_else(|| bad(format!("placement {}", meta[1])))?;
    let mask = meta[5] as u32;
    let selection = if mask == 0 {
        let points = entries[1..]
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(PARAM_PREFIX)?.strip_suffix(".alpha"))
            .map(str::to_string)
            .collect();
        Selection::Points(points)
    } else {
        Selection::Stages((0..3).filter(|i| mask & (1 << i) != 0).collect())
    };
    let spec = BufferSpec {
        design,
        placement,
        selection,
        alpha_init: meta[2],
        beta_init: meta[3],
        trainable_scales: meta[4] != 0.0,
    };
    let mut bank = BufferBank::build(model, &spec, 0).map_err(|e| bad(e.to_string()))?;
    if bank.param_names().len() != entries.len() - 1 {
        return Err(bad(format!("expected {} tensors", bank.param_names().len())));
    }
    for (name, t) in &entries[1..] {
        let dst = bank.param_mut(name).ok_or_else(|| bad(format!("unexpected `{name}`")))?;
        if dst.shape() != t.shape() {
            return Err(bad(format!("{name}: shape {:?}", t.shape())));
        }
        *dst = t.clone();
    }
    Ok(bank)
}

pub fn decode(bytes: &[u8]) -> Result<Backbone> {
    let (entries, buffers) = read_entries(bytes)?;
    let lookup = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))
    };
    let cfg = lookup(META_CONFIG)?.data();
    if cfg.len() != 9 {
        return Err(Error::CorruptCheckpoint("malformed architecture record".into()));
    }
    let u = |i: usize| cfg[i] as usize;
    let config = BackboneConfig {
        stages: u(0),
        blocks_per_stage: u(1),
        base_channels: u(2),
        num_classes: u(3),
        norm: if cfg[4] == 0.0 {
            NormKind::Batch
        } else {
            NormKind::Group { groups: u(5) }
        },
        input_shape: [u(6), u(7), u(8)],
    };
    let mut model = Backbone::build(config, 0)
        .map_err(|e| Error::CorruptCheckpoint(format!("architecture: {e}")))?;
    let norm = lookup(META_NORM)?.data();
    let std = lookup(META_STANDARDIZER)?.data();
    if norm.len() != 2 || std.len() != 6 {
        return Err(Error::CorruptCheckpoint("malformed metadata".into()));
    }
    model.norms.momentum = norm[0];
    model.norms.eps = norm[1];
    model.standardizer = Standardizer {
        mean: [std[0], std[1], std[2]],
        std: [std[3], std[4], std[5]],
    };
    let expected = table(&model).len();
    if entries.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {expected} tensors, found {}",
            entries.len()
        )));
    }
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let src = lookup(&name)?;
        let dst = model.params.tensor_mut(&name).expect("listed name");
        if src.shape() != dst.shape() {
            return Err(Error::CorruptCheckpoint(format!("{name}: shape {:?}", src.shape())));
        }
        *dst = src.clone();
    }
    for l in &mut model.norms.layers {
        let ch = l.channels();
        let field = |f: &str| -> Result<Vec<f64>> {
            let t = lookup(&format!("{}.{f}", l.name))?;
            if t.len() != ch {
                return Err(Error::CorruptCheckpoint(format!("{}.{f}: length {}", l.name, t.len())));
            }
            Ok(t.data().to_vec())
        };
        let gamma = field("gamma")?;
        let beta = field("beta")?;
        l.mu_s = field("mu_s")?;
        l.var_s = field("var_s")?;
        l.mu_run = field("mu_run")?;
        l.var_run = field("var_run")?;
        l.gamma = vector(&gamma);
        l.beta = vector(&beta);
    }
    if let Some(entries) = buffers {
        let bank = decode_bank(&model, &entries)?;
        model.set_bank(bank)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Backbone, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Backbone> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Backbone {
        let mut m = Backbone::build(BackboneConfig::default(), 3).unwrap();
        m.norms.layers[0].mu_s[0] = 0.25;
        m.norms.layers[1].var_run[2] = 3.5;
        m.standardizer.mean = [0.1, 0.2, 0.3];
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let a = encode(&m);
        let back = decode(&a).unwrap();
        assert_eq!(encode(&back), a);
        assert_eq!(back.hash_params(), m.hash_params());
        assert_eq!(back.norms, m.norms);
        assert_eq!(back.standardizer, m.standardizer);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model());
        assert_eq!(&bytes[..4], b"BTTA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = encode(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = encode(&model());
        bytes[4] = 2;
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(
            decode(&bytes),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn buffer_bank_round_trips() {
        use crate::buffer::attach_buffers;
        for selection in [Selection::Stages(vec![0, 2]), Selection::Points(vec!["b.1.ii".into()])] {
            let mut m = model();
            let spec = BufferSpec {
                design: Design::SpatialNorm,
                placement: Placement::AfterNorm,
                selection,
                ..BufferSpec::default()
            }
            .with_scales(0.5, 0.25);
            attach_buffers(&mut m, &spec, 9).unwrap();
            m.bank_mut().unwrap().set_scales(0.7, 0.1);
            let bytes = encode(&m);
            let back = decode(&bytes).unwrap();
            assert_eq!(back.bank(), m.bank());
            assert_eq!(encode(&back), bytes);
        }
        let plain = model();
        assert!(decode(&encode(&plain)).unwrap().bank().is_none());
    }

    #[test]
    fn group_norm_round_trip() {
        let m = Backbone::build(BackboneConfig::group_norm(4), 1).unwrap();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config, m.config);
    }
}
