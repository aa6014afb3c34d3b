//! Binary checkpoints: magic, format version, phase, step, config echo,
//! named parameter blocks (f64 little-endian) and a trailing CRC32.

use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::error::{GaitError, Result};
use crate::finetune::Finetuner;
use crate::heads::BnStats;
use crate::params::{ParamStore, Tensor};
use crate::rng::{stream, Stream};
use crate::ssl::{DualNetwork, OnlineNetwork, TargetNetwork};

pub const MAGIC: &[u8; 8] = b"GAITCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    /// Resolved run configuration in `key = value` form.
    pub config: String,
    pub blocks: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GaitError::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| GaitError::CorruptCheckpoint("invalid utf-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.blocks.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.phase {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        });
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in self.blocks.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(GaitError::CorruptCheckpoint("missing magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(GaitError::CorruptCheckpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GaitError::VersionMismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let phase = match r.take(1)?[0] {
            0 => Phase::Pretrain,
            1 => Phase::Finetune,
            p => return Err(GaitError::CorruptCheckpoint(format!("unknown phase {p}"))),
        };
        let step = r.u64()?;
        let config = r.string()?;
        let count = r.u32()?;
        let mut blocks = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| GaitError::CorruptCheckpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| {
                GaitError::CorruptCheckpoint(format!("{name}: shape overflow"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.insert(name, Tensor { shape, data });
        }
        if r.pos != body.len() {
            return Err(GaitError::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            phase,
            step,
            config,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| GaitError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| GaitError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GaitError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    pub fn from_pretrain(net: &DualNetwork, config: &RunConfig, step: u64) -> Self {
        let mut blocks = ParamStore::new();
        prefixed(&mut blocks, "online/", &net.online.params);
        prefixed(&mut blocks, "target/", &net.target.params);
        let (n, d2) = (net.config.backbone.strips(), net.config.feature_dim);
        prefixed(&mut blocks, "online/", &net.online.bn.to_store(n, d2));
        prefixed(&mut blocks, "target/", &net.target.bn.to_store(n, d2));
        Checkpoint {
            phase: Phase::Pretrain,
            step,
            config: config.to_text(),
            blocks,
        }
    }

    pub fn from_finetune(ft: &Finetuner, config: &RunConfig, step: u64) -> Self {
        let mut blocks = ParamStore::new();
        prefixed(&mut blocks, "backbone/", &ft.params);
        Checkpoint {
            phase: Phase::Finetune,
            step,
            config: config.to_text(),
            blocks,
        }
    }

    /// Backbone parameters (shallow CNN, HPM, MTB, FC bins) for `config`,
    /// taken from the online branch of a pre-training checkpoint or from a
    /// fine-tuned one.
    pub fn backbone_params(&self, config: &BackboneConfig) -> Result<ParamStore> {
        let prefix = match self.phase {
            Phase::Pretrain => "online/",
            Phase::Finetune => "backbone/",
        };
        let mut params = ParamStore::new();
        for part in ["enc.", "tr.", "bins."] {
            params.merge(&unprefixed(&self.blocks, &format!("{prefix}{part}")));
        }
        let reference = config.init_params(&mut stream(0, Stream::Init));
        params
            .check_same_layout(&reference)
            .map_err(|e| GaitError::VersionMismatch(format!("checkpoint does not fit the model config: {e}")))?;
        Ok(params)
    }

    /// Rebuilds both pre-training networks (optimizer state starts fresh).
    pub fn restore_dual(&self, config: &RunConfig) -> Result<DualNetwork> {
        if self.phase != Phase::Pretrain {
            return Err(GaitError::VersionMismatch("not a pre-training checkpoint".into()));
        }
        let model = &config.model;
        let stats = |side: &str| {
            BnStats::from_store(&unprefixed(&self.blocks, &format!("{side}/bn.running")))
                .ok_or_else(|| GaitError::CorruptCheckpoint(format!("{side} batch-norm statistics missing")))
        };
        let mut online_params = unprefixed(&self.blocks, "online/");
        online_params.remove("bn.running_mean");
        online_params.remove("bn.running_var");
        let mut target_params = unprefixed(&self.blocks, "target/");
        target_params.remove("bn.running_mean");
        target_params.remove("bn.running_var");
        let online = OnlineNetwork {
            params: online_params,
            bn: stats("online")?,
        };
        let target = TargetNetwork {
            params: target_params,
            bn: stats("target")?,
        };
        let reference = crate::ssl::init_online(model, &mut stream(0, Stream::Init));
        online
            .params
            .check_same_layout(&reference.params)
            .map_err(|e| GaitError::VersionMismatch(format!("checkpoint does not fit the model config: {e}")))?;
        DualNetwork::from_parts(
            model.clone(),
            online,
            target,
            config.pretrain.learning_rate,
            config.pretrain.momentum,
        )
    }

    pub fn backbone(&self, config: &BackboneConfig) -> Result<(Backbone, ParamStore)> {
        Ok((Backbone::new(config.clone())?, self.backbone_params(config)?))
    }
}

fn prefixed(into: &mut ParamStore, prefix: &str, from: &ParamStore) {
    for (name, t) in from.iter() {
        into.insert(format!("{prefix}{name}"), t.clone());
    }
}

fn unprefixed(from: &ParamStore, prefix: &str) -> ParamStore {
    let strip = prefix.rfind('/').map_or(0, |i| i + 1);
    let mut out = ParamStore::new();
    for (name, t) in from.subset(prefix).iter() {
        out.insert(&name[strip..], t.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn sample() -> Checkpoint {
        let mut blocks = ParamStore::new();
        blocks.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3e300]).unwrap());
        blocks.insert("b", Tensor::from_vec(&[1], vec![0.1]).unwrap());
        Checkpoint {
            phase: Phase::Finetune,
            step: 17,
            config: "seed = 3\n".into(),
            blocks,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(GaitError::CorruptCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(GaitError::CorruptCheckpoint(_))));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(GaitError::VersionMismatch(_))));
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let mut cfg = RunConfig::preset(Preset::Compact);
        let params = cfg.model.backbone.init_params(&mut stream(1, Stream::Init));
        let ft = Finetuner::new(Backbone::new(cfg.model.backbone.clone()).unwrap(), &params, cfg.finetune.clone()).unwrap();
        let ck = Checkpoint::from_finetune(&ft, &cfg, 0);
        assert!(ck.backbone_params(&cfg.model.backbone).is_ok());
        cfg.model.backbone.scales = 2;
        assert!(matches!(ck.backbone_params(&cfg.model.backbone), Err(GaitError::VersionMismatch(_))));
    }

    #[test]
    fn pretrain_checkpoint_restores_networks() {
        let cfg = RunConfig::preset(Preset::Compact);
        let net = DualNetwork::new(cfg.model.clone(), 1e-4, 0.99, &mut stream(2, Stream::Init)).unwrap();
        let ck = Checkpoint::from_pretrain(&net, &cfg, 5);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().restore_dual(&cfg).unwrap();
        assert_eq!(back.online, net.online);
        assert_eq!(back.target, net.target);
        assert_eq!(ck.run_config().unwrap(), cfg);
    }
}
