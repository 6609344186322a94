//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OSFD" | u32 version
//! u32 len | config text (key=value lines)
//! u32 n | n x u32 training domains
//! u64 iteration
//! u32 n | n x (u32 len | name | 32-byte seed | u64 stream | u128 word position)
//! u32 n | n x (u32 len | name | u8 trainable | u32 ndim | ndim x u64 | numel x f64)
//! ```

use std::path::Path;

use crate::backbone::BACKBONE_PREFIX;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamSet, Tensor};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"OSFD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub train_domains: Vec<u32>,
    pub iteration: u64,
    pub rng_states: Vec<(String, RngState)>,
    pub params: ParamSet,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) {
    put_u32(out, u32::try_from(v).expect("length fits in u32"));
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_len(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u32(what)? as usize;
        if n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("implausible {what} {n}")));
        }
        Ok(n)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not utf-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_text());
        put_len(&mut out, self.train_domains.len());
        for &d in &self.train_domains {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_len(&mut out, self.rng_states.len());
        for (name, state) in &self.rng_states {
            put_str(&mut out, name);
            out.extend_from_slice(&state.seed);
            out.extend_from_slice(&state.stream.to_le_bytes());
            out.extend_from_slice(&state.word_pos.to_le_bytes());
        }
        put_len(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.push(u8::from(t.requires_grad()));
            put_len(&mut out, t.ndim());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let text = r.string("config")?;
        let config = Config::from_text(&text).map_err(|e| Error::CorruptCheckpoint(format!("config echo: {e}")))?;
        let n = r.len("domain count")?;
        let train_domains = (0..n).map(|_| r.u32("domain")).collect::<Result<_>>()?;
        let iteration = r.u64("iteration")?;
        let n = r.len("rng count")?;
        let mut rng_states = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string("rng name")?;
            let seed = r.array::<32>("rng seed")?;
            let stream = r.u64("rng stream")?;
            let word_pos = u128::from_le_bytes(r.array::<16>("rng position")?);
            rng_states.push((name, RngState { seed, stream, word_pos }));
        }
        let n = r.len("parameter count")?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = r.string("parameter name")?;
            let trainable = match r.take(1, "mask")?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::CorruptCheckpoint(format!("bad mask byte {b} for `{name}`"))),
            };
            let ndim = r.len("rank")?;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64("dimension").map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible shape {shape:?} for `{name}`")))?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("`{name}`: {e}")))?;
            params.insert(name, tensor, trainable).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, train_domains, iteration, rng_states, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Checks that the stored tensors are exactly those `model` declares.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        check_params(&self.params, model)
    }

    pub fn rng_state(&self, name: &str) -> Option<&RngState> {
        self.rng_states.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

/// Loads a checkpoint and verifies it against `model`.
pub fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_model(model)?;
    Ok(ckpt)
}

pub fn check_params(params: &ParamSet, model: &ModelConfig) -> Result<()> {
    let mut specs = model.param_specs();
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    for spec in &specs {
        match params.get(&spec.name) {
            None => {
                return Err(Error::ConfigMismatch { name: spec.name.clone(), detail: "missing from checkpoint".into() })
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::ConfigMismatch {
                    name: spec.name.clone(),
                    detail: format!("checkpoint shape {:?}, config expects {:?}", t.shape(), spec.shape),
                })
            }
            Some(t) if t.requires_grad() != spec.trainable => {
                return Err(Error::ConfigMismatch { name: spec.name.clone(), detail: "trainable mask differs".into() })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
        return Err(Error::ConfigMismatch { name: extra.to_string(), detail: "not declared by the config".into() });
    }
    Ok(())
}

/// Copies every `backbone.*` tensor of `source` into `params` (shapes must
/// agree). Returns the number of tensors copied.
pub fn import_backbone(params: &mut ParamSet, source: &ParamSet) -> Result<usize> {
    let mut copied = 0;
    for (name, t) in source.iter().filter(|(n, _)| n.starts_with(BACKBONE_PREFIX)) {
        if !params.contains(name) {
            return Err(Error::ConfigMismatch { name: name.to_string(), detail: "not declared by the config".into() });
        }
        params.set_value(name, Tensor::new(t.shape().to_vec(), t.data().to_vec())?)?;
        copied += 1;
    }
    Ok(copied)
}
