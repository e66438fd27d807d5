//! Binary checkpoint container.
//!
//! ```text
//! "SMCK"                     magic, 4 bytes
//! version                    u32 LE
//! config length, config      u32 LE, canonical `key=value` text
//! tensor count               u32 LE
//! per tensor:
//!   name length, name        u16 LE, UTF-8
//!   rank, dims               u8, u32 LE each
//!   dtype                    u8: 0 = f32, 1 = u64
//!   payload                  little-endian elements
//! ```
//!
//! Parameters are stored under their own names, Adam moments under
//! `optim.m.<name>` / `optim.v.<name>`, and bookkeeping as u64 tensors
//! (`optim.step`, `schedule.position`, `rng.seed`, `history.phase`, and
//! `history.loss` holding the bit patterns of the f64 epoch losses).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::codec::{param_specs, CodecConfig, CodecParams, Tensor};
use crate::error::{Error, Result};
use crate::training::{AdamState, EpochRecord, History};

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

/// Next (phase, epoch) to run; `phase == phases.len()` means finished.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SchedulePosition {
    pub phase: u32,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CodecParams<f32>,
    pub adam: AdamState<f32>,
    pub position: SchedulePosition,
    pub seed: u64,
    pub history: History,
}

impl Checkpoint {
    /// A checkpoint holding only weights (fresh optimizer, no history).
    pub fn from_params(params: CodecParams<f32>) -> Self {
        let adam = AdamState::new(&params);
        Self {
            params,
            adam,
            position: SchedulePosition::default(),
            seed: 0,
            history: History::default(),
        }
    }
}

enum Payload {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

struct Record {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

fn write_record(buf: &mut Vec<u8>, r: &Record) {
    let name = r.name.as_bytes();
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name);
    buf.push(r.shape.len() as u8);
    for &d in &r.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &r.payload {
        Payload::F32(v) => {
            buf.push(DTYPE_F32);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::U64(v) => {
            buf.push(DTYPE_U64);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut records = Vec::new();
    let f32_rec = |name: String, shape: Vec<usize>, data: &[f32]| Record {
        name,
        shape,
        payload: Payload::F32(data.to_vec()),
    };
    for t in ck.params.tensors() {
        records.push(f32_rec(t.name.clone(), t.shape.clone(), &t.data));
    }
    for (t, m) in ck.params.tensors().iter().zip(&ck.adam.m) {
        records.push(f32_rec(format!("optim.m.{}", t.name), t.shape.clone(), m));
    }
    for (t, v) in ck.params.tensors().iter().zip(&ck.adam.v) {
        records.push(f32_rec(format!("optim.v.{}", t.name), t.shape.clone(), v));
    }
    let u64_rec = |name: &str, data: Vec<u64>| Record {
        name: name.into(),
        shape: vec![data.len()],
        payload: Payload::U64(data),
    };
    records.push(u64_rec("optim.step", vec![ck.adam.step]));
    records.push(u64_rec(
        "schedule.position",
        vec![ck.position.phase as u64, ck.position.epoch as u64],
    ));
    records.push(u64_rec("rng.seed", vec![ck.seed]));
    let hist = &ck.history.epochs;
    records.push(u64_rec(
        "history.phase",
        hist.iter().map(|e| ((e.phase as u64) << 32) | e.epoch as u64).collect(),
    ));
    records.push(u64_rec("history.loss", hist.iter().map(|e| e.mean_loss.to_bits()).collect()));

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ck.params.config().to_canonical_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        write_record(&mut buf, r);
    }
    buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.data.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<Record, String> {
    let nlen = r.u16()? as usize;
    let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    let payload = match r.u8()? {
        DTYPE_F32 => Payload::F32(
            r.take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_U64 => Payload::U64(
            r.take(numel * 8)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        other => return Err(format!("tensor {name}: unknown dtype tag {other}")),
    };
    Ok(Record { name, shape, payload })
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::format(path, reason);
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4).map_err(fail)? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let clen = r.u32().map_err(fail)? as usize;
    let text = std::str::from_utf8(r.take(clen).map_err(fail)?).map_err(|_| fail("config is not UTF-8".into()))?;
    let config = CodecConfig::from_canonical_text(text)?;
    let count = r.u32().map_err(fail)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        records.push(read_record(&mut r).map_err(fail)?);
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut by_name: std::collections::HashMap<String, Record> =
        records.into_iter().map(|rec| (rec.name.clone(), rec)).collect();
    let mut take_f32 = |name: &str, shape: Option<&[usize]>| -> Result<Vec<f32>> {
        match by_name.remove(name) {
            Some(Record { payload: Payload::F32(v), shape: s, .. }) if shape.is_none_or(|e| e == s) => Ok(v),
            Some(_) => Err(fail(format!("tensor {name} has the wrong shape or dtype"))),
            None => Err(fail(format!("missing tensor {name}"))),
        }
    };
    let specs = param_specs(&config);
    let mut tensors = Vec::with_capacity(specs.len());
    let mut m = Vec::with_capacity(specs.len());
    let mut v = Vec::with_capacity(specs.len());
    for s in &specs {
        tensors.push(Tensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data: take_f32(&s.name, Some(&s.shape))?,
        });
        m.push(take_f32(&format!("optim.m.{}", s.name), Some(&s.shape))?);
        v.push(take_f32(&format!("optim.v.{}", s.name), Some(&s.shape))?);
    }
    let mut take_u64 = |name: &str| -> Result<Vec<u64>> {
        match by_name.remove(name) {
            Some(Record { payload: Payload::U64(v), .. }) => Ok(v),
            Some(_) => Err(fail(format!("tensor {name} has the wrong dtype"))),
            None => Err(fail(format!("missing tensor {name}"))),
        }
    };
    let step = take_u64("optim.step")?;
    let position = take_u64("schedule.position")?;
    let seed = take_u64("rng.seed")?;
    let hist_ids = take_u64("history.phase")?;
    let losses = take_u64("history.loss")?;
    if step.len() != 1 || position.len() != 2 || seed.len() != 1 || hist_ids.len() != losses.len() {
        return Err(fail("malformed bookkeeping tensors".into()));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(fail(format!("unexpected tensor {extra}")));
    }
    let params = CodecParams::from_tensors(&config, tensors)?;
    Ok(Checkpoint {
        params,
        adam: AdamState { step: step[0], m, v },
        position: SchedulePosition {
            phase: position[0] as u32,
            epoch: position[1] as u32,
        },
        seed: seed[0],
        history: History {
            epochs: hist_ids
                .iter()
                .zip(&losses)
                .map(|(&id, &l)| EpochRecord {
                    phase: (id >> 32) as u32,
                    epoch: id as u32,
                    mean_loss: f64::from_bits(l),
                })
                .collect(),
        },
    })
}

/// Atomic write: the bytes go to a sibling temp file that is then renamed.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and rejects it unless it was built with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &CodecConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.params.config() != expected {
        return Err(Error::ConfigMismatch);
    }
    Ok(ck)
}
