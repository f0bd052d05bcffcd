//! Versioned checkpoint container.
//!
//! Layout: `MAMBOCKPT\0`, one version byte, a little-endian u64 header
//! length, a JSON header, then every tensor's f32 values little-endian in
//! index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{NetConfig, UNet};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, VarianceKind};

pub const MAGIC: &[u8; 10] = b"MAMBOCKPT\0";
pub const VERSION: u8 = 1;

/// Optimizer tensors carry this prefix and are skipped when building a net.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub variance: VarianceKind,
}

impl ScheduleMeta {
    pub fn of(s: &NoiseSchedule) -> Self {
        Self {
            steps: s.steps(),
            beta_min: s.beta_min(),
            beta_max: s.beta_max(),
            variance: s.variance(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_with_variance(self.steps, self.beta_min, self.beta_max, self.variance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub schedule: ScheduleMeta,
    pub iteration: u64,
    pub stage: u8,
    pub seed: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    schedule: ScheduleMeta,
    iteration: u64,
    stage: u8,
    seed: u64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    /// Snapshot of a network's parameters without optimizer state.
    pub fn from_net(net: &UNet, schedule: &NoiseSchedule, stage: u8) -> Self {
        Self {
            net: net.config().clone(),
            schedule: ScheduleMeta::of(schedule),
            iteration: 0,
            stage,
            seed: 0,
            optimizer_step: 0,
            tensors: net.to_tensors(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn network(&self) -> Result<UNet> {
        let params: Vec<Tensor> = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with(OPTIMIZER_PREFIX))
            .cloned()
            .collect();
        UNet::from_tensors(self.net.clone(), &params)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Contract(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len() as u64,
            });
            offset += t.data.len() as u64;
        }
        let header = Header {
            net: self.net.clone(),
            schedule: self.schedule,
            iteration: self.iteration,
            stage: self.stage,
            seed: self.seed,
            optimizer_step: self.optimizer_step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let io = |e| Error::io("<checkpoint stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&[VERSION]).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic).map_err(|_| format_err("truncated magic"))?;
        if &magic != MAGIC {
            return Err(format_err("bad magic"));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver).map_err(|_| format_err("truncated version"))?;
        if ver[0] != VERSION {
            return Err(format_err(format!("unsupported version {}", ver[0])));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| format_err("truncated header length"))?;
        let len = u64::from_le_bytes(len);
        let mut json = vec![0u8; usize::try_from(len).map_err(|_| format_err("header too large"))?];
        r.read_exact(&mut json).map_err(|_| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io("<checkpoint stream>", e))?;
        if payload.len() % 4 != 0 {
            return Err(format_err("payload is not a whole number of f32 values"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let (start, n) = (e.offset as usize, e.len as usize);
            if e.shape.iter().product::<usize>() != n || start + n > values.len() {
                return Err(format_err(format!("tensor {} index out of range", e.name)));
            }
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data: values[start..start + n].to_vec(),
            });
        }
        Ok(Self {
            net: header.net,
            schedule: header.schedule,
            iteration: header.iteration,
            stage: header.stage,
            seed: header.seed,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| relabel(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| relabel(e, path))
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = UNet::new(NetConfig::desk(3), 5).unwrap();
        let sched = NoiseSchedule::linear_matched(200, VarianceKind::Beta).unwrap();
        let mut ck = Checkpoint::from_net(&net, &sched, 3);
        ck.iteration = 42;
        ck.tensors.push(Tensor {
            name: "adam.m.init.bias".into(),
            shape: vec![16],
            data: vec![0.25; 16],
        });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..10], MAGIC);
        assert_eq!(buf[10], VERSION);
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.network().unwrap();
        assert_eq!(rebuilt.params(), net.params());
        let s2 = back.schedule.build().unwrap();
        assert_eq!(s2.alpha_bars(), sched.alpha_bars());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT\0\0\x01"[..]),
            Err(Error::Format { .. })
        ));
        let net = UNet::new(NetConfig::desk(1), 0).unwrap();
        let sched = NoiseSchedule::reference();
        let mut ck = Checkpoint::from_net(&net, &sched, 1);
        ck.net = NetConfig::desk(3);
        let err = ck.network().unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("init.weight")));
    }
}
