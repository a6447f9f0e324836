use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::featuremap::read_u32;

use super::{DescriptorNet, DetectorNet, Module, Param, SgdNesterov};

const MAGIC: &[u8; 4] = b"PFW1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Descriptor,
    Detector,
}

/// Header blob stored as JSON ahead of the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: NetKind,
    pub config: TrainConfig,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensors plus the configuration they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    fn collect<'a>(meta: CheckpointMeta, params: impl Iterator<Item = &'a Param<f32>>, opt: Option<&SgdNesterov<f32>>) -> Self {
        let mut tensors: Vec<TensorRecord> = params
            .map(|p| TensorRecord { name: p.name.clone(), dims: p.shape.clone(), data: p.value.clone() })
            .collect();
        if let Some(opt) = opt {
            let shapes: Vec<(String, Vec<usize>)> = tensors.iter().map(|t| (t.name.clone(), t.dims.clone())).collect();
            for (name, dims) in shapes {
                if let Some(buf) = opt.buffers.get(&name) {
                    tensors.push(TensorRecord { name: format!("{MOMENTUM_PREFIX}{name}"), dims, data: buf.clone() });
                }
            }
        }
        Self { meta, tensors }
    }

    pub fn from_descriptor(net: &DescriptorNet<f32>, opt: Option<&SgdNesterov<f32>>, config: &TrainConfig, iteration: u64) -> Self {
        let meta = CheckpointMeta { kind: NetKind::Descriptor, config: config.clone(), iteration };
        Self::collect(meta, net.params().into_iter(), opt)
    }

    pub fn from_detector(net: &DetectorNet<f32>, opt: Option<&SgdNesterov<f32>>, config: &TrainConfig, iteration: u64) -> Self {
        let meta = CheckpointMeta { kind: NetKind::Detector, config: config.clone(), iteration };
        Self::collect(meta, net.params().into_iter(), opt)
    }

    fn expect_kind(&self, kind: NetKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::format("checkpoint", format!("expected a {kind:?} checkpoint, found {:?}", self.meta.kind)));
        }
        Ok(())
    }

    fn load_into<'a>(&self, params: impl Iterator<Item = &'a mut Param<f32>>) -> Result<()> {
        for p in params {
            let rec = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", p.name)))?;
            if rec.dims != p.shape {
                return Err(Error::format("checkpoint", format!("tensor {} has dims {:?}, expected {:?}", p.name, rec.dims, p.shape)));
            }
            p.value.copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn descriptor(&self) -> Result<DescriptorNet<f32>> {
        self.expect_kind(NetKind::Descriptor)?;
        let cfg = &self.meta.config;
        let mut net = DescriptorNet::new(cfg.descriptor_channels, cfg.normalize_descriptors, 0);
        self.load_into(net.params_mut().into_iter())?;
        Ok(net)
    }

    pub fn detector(&self) -> Result<DetectorNet<f32>> {
        self.expect_kind(NetKind::Detector)?;
        let mut net = DetectorNet::new(self.meta.config.descriptor_channels, 0);
        self.load_into(net.params_mut().into_iter())?;
        Ok(net)
    }

    /// Optimizer state restored from the stored momentum buffers.
    pub fn optimizer(&self) -> SgdNesterov<f32> {
        let mut opt = SgdNesterov::new(self.meta.config.lr, self.meta.config.momentum);
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(MOMENTUM_PREFIX) {
                opt.buffers.insert(name.to_string(), t.data.clone());
            }
        }
        opt
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&self.meta)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Tensor records run until end of stream.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("checkpoint", "truncated header"))?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { kind: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::format("checkpoint", "truncated config"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        let mut tensors = Vec::new();
        loop {
            let mut len = [0u8; 4];
            match r.read(&mut len[..1])? {
                0 => break,
                _ => r.read_exact(&mut len[1..]).map_err(|_| Error::format("checkpoint", "truncated record"))?,
            }
            let name_len = u32::from_le_bytes(len) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| Error::format("checkpoint", "truncated record"))?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::format("checkpoint", format!("tensor {name} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|_| Error::format("checkpoint", format!("truncated data for {name}")))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        Ok(Self { meta, tensors })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.write_to(BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read_from(BufReader::new(std::fs::File::open(path)?))
}
