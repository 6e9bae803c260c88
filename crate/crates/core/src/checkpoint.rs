//! Binary checkpoint files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "CRUN" version
//! entry*  where entry = name_len name_bytes rank dims[rank] f32[∏dims]
//! ```
//!
//! The first entry carries run metadata instead of a tensor: its name is
//! `#meta` followed by newline-separated `key=value` lines (the model spec,
//! seed and epoch), with rank 1, dims `[0]` and no payload. Every other entry
//! is one parameter or batch-norm running statistic, in store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRUN";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "#meta\n";

/// Run information stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, seed: u64, epoch: usize) -> Self {
        let entries = model
            .params()
            .entries()
            .iter()
            .map(|e| CheckpointEntry { name: e.name.clone(), dims: e.value.dims().to_vec(), data: e.value.to_f32() })
            .collect();
        Checkpoint { meta: CheckpointMeta { spec: model.spec().clone(), seed, epoch }, entries }
    }

    /// Copies the stored values into `model`, which must have exactly the
    /// same parameter names and shapes in the same order.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let store = model.params();
        for (i, e) in store.entries().iter().enumerate() {
            let expected = e.value.dims().to_vec();
            match self.entries.get(i) {
                Some(c) if c.name == e.name && c.dims == expected => {}
                Some(c) if c.name == e.name => {
                    return Err(Error::ParamMismatch { name: e.name.clone(), expected, found: c.dims.clone() })
                }
                _ => {
                    let found = self.entries.iter().find(|c| c.name == e.name).map(|c| c.dims.clone()).unwrap_or_default();
                    return Err(Error::ParamMismatch { name: e.name.clone(), expected, found });
                }
            }
        }
        if let Some(extra) = self.entries.get(store.len()) {
            return Err(Error::ParamMismatch { name: extra.name.clone(), expected: Vec::new(), found: extra.dims.clone() });
        }
        let store = model.params_mut();
        let ids: Vec<_> = store.ids().collect();
        for (id, c) in ids.into_iter().zip(&self.entries) {
            *store.value_mut(id) = Tensor::from_f32(c.dims.clone(), &c.data)?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored spec.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::build(self.meta.spec.clone())?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::Format(format!("write failed: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        let mut meta = String::from(META_PREFIX);
        for (k, v) in self.meta.spec.to_pairs() {
            meta.push_str(&format!("{k}={v}\n"));
        }
        meta.push_str(&format!("seed={}\nepoch={}\n", self.meta.seed, self.meta.epoch));
        write_entry(w, &meta, &[0], &[]).map_err(io)?;
        for e in &self.entries {
            write_entry(w, &e.name, &e.dims, &e.data).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"CRUN\"")));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let Some((meta_name, _, _)) = read_entry(r)? else {
            return Err(Error::Truncated("metadata entry".into()));
        };
        let meta = parse_meta(&meta_name)?;
        let mut entries = Vec::new();
        while let Some((name, dims, data)) = read_entry(r)? {
            entries.push(CheckpointEntry { name, dims, data });
        }
        Ok(Checkpoint { meta, entries })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

pub fn save_model<T: Scalar>(model: &Model<T>, seed: u64, epoch: usize, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, seed, epoch).save(path)
}

/// Loads a checkpoint and rebuilds its model from the stored spec.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.meta))
}

/// Loads a checkpoint into a model built from `spec`; parameter names and
/// shapes must agree.
pub fn load_model_for_spec<T: Scalar>(path: &Path, spec: &ModelSpec) -> Result<Model<T>> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::build(spec.clone())?;
    ckpt.apply_to(&mut model)?;
    Ok(model)
}

fn write_entry<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    let u32_of = |v: usize| {
        u32::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "value exceeds u32"))
    };
    w.write_all(&u32_of(name.len())?.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&u32_of(dims.len())?.to_le_bytes())?;
    for &d in dims {
        w.write_all(&u32_of(d)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Format(format!("read failed at {what}: {e}")),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

type RawEntry = (String, Vec<usize>, Vec<f32>);

/// `None` on a clean end of file at an entry boundary.
fn read_entry<R: Read>(r: &mut R) -> Result<Option<RawEntry>> {
    let mut first = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut first[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Truncated("entry header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(format!("read failed: {e}"))),
        }
    }
    let name_len = u32::from_le_bytes(first) as usize;
    if name_len > 1 << 20 {
        return Err(Error::Format(format!("entry name length {name_len} is implausible")));
    }
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, "entry name")?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
    let rank = read_u32(r, &format!("rank of `{name}`"))? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("entry `{name}` has implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r, &format!("dims of `{name}`"))? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= 1 << 31)
        .ok_or_else(|| Error::Format(format!("entry `{name}` has implausible dims {dims:?}")))?;
    let mut bytes = vec![0u8; count * 4];
    read_exact(r, &mut bytes, &format!("payload of `{name}`"))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Some((name, dims, data)))
}

fn parse_meta(name: &str) -> Result<CheckpointMeta> {
    let body = name
        .strip_prefix(META_PREFIX)
        .ok_or_else(|| Error::Format("first entry is not the metadata block".into()))?;
    let mut spec = ModelSpec::default();
    let (mut seed, mut epoch) = (None, None);
    for line in body.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
        match k {
            "seed" => seed = v.parse().ok(),
            "epoch" => epoch = v.parse().ok(),
            _ => {
                if !spec.set(k, v).map_err(|e| Error::Format(format!("metadata: {e}")))? {
                    return Err(Error::Format(format!("unknown metadata key `{k}`")));
                }
            }
        }
    }
    Ok(CheckpointMeta {
        spec,
        seed: seed.ok_or_else(|| Error::Format("metadata lacks seed".into()))?,
        epoch: epoch.ok_or_else(|| Error::Format("metadata lacks epoch".into()))?,
    })
}
