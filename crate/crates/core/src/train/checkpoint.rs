//! Binary checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "PNRMCKPT"
//! version     u32
//! digest      32 bytes sha256 of the CONF section
//! n_sections  u32
//! table       n_sections x { tag [u8; 4], offset u64, len u64, crc32 u32 }
//! header_crc  u32      crc32 of everything above
//! payloads    concatenated section bodies
//! ```
//!
//! Sections: `CONF` (JSON), `PARM` (named tensors), `BANK` (prototype banks),
//! `OPTM` (AdamW moments), `STAT` (loop position and RNG).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, Moments, OptimConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PNRMCKPT";
pub const SCHEMA_VERSION: u32 = 1;

const TAGS: [&[u8; 4]; 5] = [b"CONF", b"PARM", b"BANK", b"OPTM", b"STAT"];
const ENTRY_LEN: usize = 4 + 8 + 8 + 4;

/// Where a training loop stands.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: u64,
    /// Batches already consumed in `epoch`.
    pub cursor: u64,
    /// Stream feeding augmentation and dropout.
    pub rng: RngState,
    pub prototype_frozen: bool,
    pub best_val: Option<f64>,
    pub best_step: u64,
    pub since_best: u64,
}

impl TrainState {
    pub fn new(rng: RngState, prototype_frozen: bool) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            cursor: 0,
            rng,
            prototype_frozen,
            best_val: None,
            best_step: 0,
            since_best: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfSection {
    encoder: EncoderConfig,
    seed: u64,
    n_classes: Option<usize>,
    optim: OptimConfig,
    run: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub optimizer: AdamW,
    pub state: TrainState,
    /// Resolved run configuration, stored verbatim.
    pub run_config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.encoder.sites().any(|s| s.bank.has_pending()) {
            return Err(Error::Contract("cannot checkpoint with EMA updates still queued".into()));
        }
        let conf = serde_json::to_vec(&ConfSection {
            encoder: self.encoder.config().clone(),
            seed: self.encoder.seed(),
            n_classes: self.encoder.n_classes(),
            optim: self.optimizer.cfg.clone(),
            run: self.run_config.clone(),
        })
        .map_err(|e| Error::Contract(format!("config does not serialize: {e}")))?;
        let bodies = [
            conf,
            self.params_section(),
            self.bank_section(),
            self.optim_section(),
            self.state_section(),
        ];
        let digest: [u8; 32] = Sha256::digest(&bodies[0]).into();
        let mut out = Writer::default();
        out.bytes(MAGIC);
        out.u32(SCHEMA_VERSION);
        out.bytes(&digest);
        out.u32(TAGS.len() as u32);
        let mut offset = (8 + 4 + 32 + 4 + TAGS.len() * ENTRY_LEN + 4) as u64;
        for (tag, body) in TAGS.iter().zip(&bodies) {
            out.bytes(*tag);
            out.u64(offset);
            out.u64(body.len() as u64);
            out.u32(crc32fast::hash(body));
            offset += body.len() as u64;
        }
        let header_crc = crc32fast::hash(&out.0);
        out.u32(header_crc);
        for body in &bodies {
            out.bytes(body);
        }
        Ok(out.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "schema version {version}, this build reads {SCHEMA_VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u32()? as usize;
        if n != TAGS.len() {
            return Err(corrupt("unexpected section count"));
        }
        let mut sections = Vec::with_capacity(n);
        for tag in TAGS {
            if r.take(4)? != tag {
                return Err(corrupt("unexpected section tag"));
            }
            sections.push((r.u64()?, r.u64()?, r.u32()?));
        }
        let header_len = r.pos;
        let header_crc = r.u32()?;
        if crc32fast::hash(&bytes[..header_len]) != header_crc {
            return Err(corrupt("header checksum mismatch"));
        }
        let mut bodies = Vec::with_capacity(n);
        for (tag, (offset, len, crc)) in TAGS.iter().zip(sections) {
            let end = offset.checked_add(len).filter(|&e| e <= bytes.len() as u64);
            let Some(end) = end else {
                return Err(corrupt("truncated section"));
            };
            let body = &bytes[offset as usize..end as usize];
            if crc32fast::hash(body) != crc {
                return Err(Error::Integrity(format!(
                    "checksum mismatch in section {}",
                    String::from_utf8_lossy(*tag)
                )));
            }
            bodies.push(body);
        }
        let expected: [u8; 32] = Sha256::digest(bodies[0]).into();
        if expected != digest {
            return Err(corrupt("config digest mismatch"));
        }
        let conf: ConfSection = serde_json::from_slice(bodies[0]).map_err(|e| corrupt(&format!("config: {e}")))?;
        let mut encoder = Encoder::new(conf.encoder, conf.seed).map_err(|e| corrupt(&format!("config: {e}")))?;
        if let Some(c) = conf.n_classes {
            encoder.attach_classifier(c).map_err(|e| corrupt(&e.to_string()))?;
        }
        read_params(bodies[1], &mut encoder)?;
        read_banks(bodies[2], &mut encoder)?;
        let moments = read_moments(bodies[3])?;
        let state = read_state(bodies[4])?;
        Ok(Checkpoint {
            encoder,
            optimizer: AdamW {
                cfg: conf.optim,
                moments,
            },
            state,
            run_config: conf.run,
        })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn params_section(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let mut count = 0u32;
        let mut body = Writer::default();
        self.encoder.visit(&mut |p| {
            count += 1;
            body.str(&p.name);
            body.tensor(&p.value);
        });
        w.u32(count);
        w.bytes(&body.0);
        w.0
    }

    fn bank_section(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let sites: Vec<_> = self.encoder.sites().collect();
        w.u32(sites.len() as u32);
        for s in sites {
            w.u8(s.bank.frozen as u8);
            w.tensor(&s.bank.prototypes.value);
            w.u32(s.bank.assignment_counts.len() as u32);
            for &c in &s.bank.assignment_counts {
                w.u64(c);
            }
        }
        w.0
    }

    fn optim_section(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.optimizer.moments.len() as u32);
        for (name, m) in &self.optimizer.moments {
            w.str(name);
            w.u64(m.step);
            w.tensor(&m.m);
            w.tensor(&m.v);
        }
        w.0
    }

    fn state_section(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = Writer::default();
        w.u64(s.step);
        w.u64(s.epoch);
        w.u64(s.cursor);
        w.bytes(&s.rng.seed);
        w.u64(s.rng.stream);
        w.bytes(&s.rng.word_pos.to_le_bytes());
        w.u8(s.prototype_frozen as u8);
        w.u8(s.best_val.is_some() as u8);
        w.f64(s.best_val.unwrap_or(0.0));
        w.u64(s.best_step);
        w.u64(s.since_best);
        w.0
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Integrity(msg.to_string())
}

fn read_params(body: &[u8], encoder: &mut Encoder) -> Result<()> {
    let mut r = Reader::new(body);
    let n = r.u32()? as usize;
    let mut stored = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        stored.insert(name, r.tensor()?);
    }
    r.finish()?;
    let mut problem = None;
    let mut used = 0;
    encoder.visit_mut(&mut |p| match stored.get(&p.name) {
        Some(t) if t.shape() == p.value.shape() => {
            p.value = t.clone();
            used += 1;
        }
        _ => {
            problem.get_or_insert_with(|| format!("parameter {} missing or misshapen", p.name));
        }
    });
    if let Some(msg) = problem {
        return Err(corrupt(&msg));
    }
    if used != stored.len() {
        return Err(corrupt("checkpoint holds parameters the model does not have"));
    }
    Ok(())
}

fn read_banks(body: &[u8], encoder: &mut Encoder) -> Result<()> {
    let mut r = Reader::new(body);
    let n = r.u32()? as usize;
    let mut sites: Vec<_> = encoder.sites_mut().collect();
    if n != sites.len() {
        return Err(corrupt("bank count does not match the model"));
    }
    for site in sites.iter_mut() {
        site.bank.frozen = r.u8()? != 0;
        let protos = r.tensor()?;
        if protos.shape() != site.bank.prototypes.value.shape() {
            return Err(corrupt("prototype bank shape mismatch"));
        }
        site.bank.prototypes.value = protos;
        let k = r.u32()? as usize;
        if k != site.bank.assignment_counts.len() {
            return Err(corrupt("assignment count length mismatch"));
        }
        for c in site.bank.assignment_counts.iter_mut() {
            *c = r.u64()?;
        }
    }
    r.finish()
}

fn read_moments(body: &[u8]) -> Result<BTreeMap<String, Moments>> {
    let mut r = Reader::new(body);
    let n = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let step = r.u64()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        out.insert(name, Moments { step, m, v });
    }
    r.finish()?;
    Ok(out)
}

fn read_state(body: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(body);
    let step = r.u64()?;
    let epoch = r.u64()?;
    let cursor = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let prototype_frozen = r.u8()? != 0;
    let has_best = r.u8()? != 0;
    let best = r.f64()?;
    let state = TrainState {
        step,
        epoch,
        cursor,
        rng: RngState { seed, stream, word_pos },
        prototype_frozen,
        best_val: has_best.then_some(best),
        best_step: r.u64()?,
        since_best: r.u64()?,
    };
    r.finish()?;
    Ok(state)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8 name"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt("implausible tensor rank"));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= (self.buf.len() - self.pos) / 8);
        let numel = numel.ok_or_else(|| corrupt("tensor larger than its section"))?;
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(corrupt("trailing bytes in section"))
        }
    }
}
