//! Checkpoint container.
//!
//! ```text
//! magic "VGCK" | version u16
//! config     planes, height, width u32 | channels (u32 count, u32 each)
//!            feature_dim, head_hidden u32 | 3 loss weights | bn momentum, eps
//! meta       target set str | fold, epoch u32 | val loss | config digest [32]
//!            dataset digest [32] | test ids (u32 count, u64 each)
//! tensors    u32 count × (name str, u8 rank, u32 dims, f64 data)
//! bn stats   per block: mean f64s, var f64s
//! thresholds patient score u8 | cadrads | calc? | segment?
//! ```
//!
//! Strings and float lists carry a u32 length prefix; floats are IEEE-754
//! bit patterns, so equal bytes mean equal inference.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{LossWeights, ModelConfig};
use super::params::ModelParams;
use crate::autodiff::Tensor;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
pub use crate::evaluation::ThresholdSet;
use crate::evaluation::{BinningThresholds, PatientScore};
use crate::io::write_atomic;

pub const MAGIC: [u8; 4] = *b"VGCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub target_set: String,
    pub fold: u32,
    pub epoch: u32,
    pub val_loss: f64,
    pub config_digest: [u8; 32],
    pub dataset_digest: [u8; 32],
    /// Dataset indices of the held-out test patients.
    pub test_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub thresholds: ThresholdSet,
    pub meta: CheckpointMeta,
}

fn put_thresholds(w: &mut Writer, t: &BinningThresholds) {
    w.str(&t.fitted_on);
    w.f64s(&t.cuts);
}

fn get_thresholds(r: &mut Reader<'_>, what: &str) -> Result<BinningThresholds> {
    Ok(BinningThresholds {
        fitted_on: r.str(what)?,
        cuts: r.f64s(what)?,
    })
}

fn get_optional(r: &mut Reader<'_>, what: &str) -> Result<Option<BinningThresholds>> {
    let at = r.offset();
    match r.u8(what)? {
        0 => Ok(None),
        1 => Ok(Some(get_thresholds(r, what)?)),
        v => Err(Error::format(at, format!("bad presence flag {v} for {what}"))),
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u16(FORMAT_VERSION);

        let c = &self.params.config;
        for v in [c.input_planes, c.input_height, c.input_width] {
            w.len(v);
        }
        w.len(c.conv_channels.len());
        for &ch in &c.conv_channels {
            w.len(ch);
        }
        w.len(c.feature_dim);
        w.len(c.head_hidden);
        for v in [
            c.loss_weights.cadrads,
            c.loss_weights.stenosis,
            c.loss_weights.calc,
            c.bn_momentum,
            c.bn_eps,
        ] {
            w.f64(v);
        }

        let m = &self.meta;
        w.str(&m.target_set);
        w.u32(m.fold);
        w.u32(m.epoch);
        w.f64(m.val_loss);
        w.bytes(&m.config_digest);
        w.bytes(&m.dataset_digest);
        w.len(m.test_ids.len());
        for &id in &m.test_ids {
            w.u64(id);
        }

        let named = self.params.named_tensors();
        w.len(named.len());
        for (name, t) in named {
            w.str(&name);
            w.u8(t.ndim() as u8);
            for &d in t.shape() {
                w.len(d);
            }
            for &x in t.data() {
                w.f64(x);
            }
        }
        for b in &self.params.extractor.blocks {
            w.f64s(&b.stats.mean);
            w.f64s(&b.stats.var);
        }

        let t = &self.thresholds;
        w.u8(match t.patient_score {
            PatientScore::CadradsHead => 0,
            PatientScore::MaxSegment => 1,
        });
        put_thresholds(&mut w, &t.cadrads);
        for opt in [&t.calc, &t.segment] {
            match opt {
                None => w.u8(0),
                Some(x) => {
                    w.u8(1);
                    put_thresholds(&mut w, x);
                }
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"VGCK\""));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }

        let config_at = r.offset();
        let input_planes = r.len("input planes")?;
        let input_height = r.len("input height")?;
        let input_width = r.len("input width")?;
        let n = r.len("block count")?;
        let conv_channels = (0..n).map(|_| r.len("channel count")).collect::<Result<_>>()?;
        let feature_dim = r.len("feature dim")?;
        let head_hidden = r.len("head hidden")?;
        let loss_weights = LossWeights {
            cadrads: r.f64("loss weight")?,
            stenosis: r.f64("loss weight")?,
            calc: r.f64("loss weight")?,
        };
        let config = ModelConfig {
            input_planes,
            input_height,
            input_width,
            conv_channels,
            feature_dim,
            head_hidden,
            loss_weights,
            bn_momentum: r.f64("bn momentum")?,
            bn_eps: r.f64("bn eps")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(config_at, format!("stored config invalid: {e}")))?;

        let target_set = r.str("target set")?;
        let fold = r.u32("fold")?;
        let epoch = r.u32("epoch")?;
        let val_loss = r.f64("validation loss")?;
        let config_digest = r.array32("config digest")?;
        let dataset_digest = r.array32("dataset digest")?;
        let n = r.len("test id count")?;
        let test_ids = (0..n).map(|_| r.u64("test id")).collect::<Result<_>>()?;

        let mut params = ModelParams::init(&config, 0)?;
        let at = r.offset();
        let count = r.len("tensor count")?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if count != expected.len() {
            return Err(Error::format(
                at,
                format!("{count} tensors stored, config implies {}", expected.len()),
            ));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let at = r.offset();
            let stored = r.str("tensor name")?;
            let rank = r.u8("tensor rank")? as usize;
            let dims = (0..rank).map(|_| r.len("tensor extent")).collect::<Result<Vec<_>>>()?;
            if &stored != name || &dims != shape {
                return Err(Error::format(
                    at,
                    format!("tensor {stored} {dims:?} where {name} {shape:?} was expected"),
                ));
            }
            let numel: usize = dims.iter().product();
            let data = (0..numel).map(|_| r.f64(&stored)).collect::<Result<Vec<_>>>()?;
            loaded.push(Tensor::new(dims, data)?.with_grad());
        }
        for (slot, t) in params.tensors_mut(&super::ParamGroup::ALL).into_iter().zip(loaded) {
            *slot = t;
        }
        for b in &mut params.extractor.blocks {
            let at = r.offset();
            let mean = r.f64s("running mean")?;
            let var = r.f64s("running variance")?;
            if mean.len() != b.stats.channels() || var.len() != b.stats.channels() {
                return Err(Error::format(at, "running statistics do not match channel count"));
            }
            b.stats.mean = mean;
            b.stats.var = var;
        }

        let at = r.offset();
        let patient_score = match r.u8("patient score kind")? {
            0 => PatientScore::CadradsHead,
            1 => PatientScore::MaxSegment,
            v => return Err(Error::format(at, format!("unknown patient score kind {v}"))),
        };
        let thresholds = ThresholdSet {
            patient_score,
            cadrads: get_thresholds(&mut r, "CAD-RADS thresholds")?,
            calc: get_optional(&mut r, "calcification thresholds")?,
            segment: get_optional(&mut r, "segment thresholds")?,
        };
        if !r.is_done() {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            params,
            thresholds,
            meta: CheckpointMeta {
                target_set,
                fold,
                epoch,
                val_loss,
                config_digest,
                dataset_digest,
                test_ids,
            },
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
