//! Versioned binary parameter container: magic bytes, format version,
//! training configuration, then per-tensor shape and little-endian f64
//! payloads.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionConfig, TransferMode};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{CriticParams, GeneratorParams, TrainConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFCK";
const VERSION: u32 = 1;

/// Trained model bundle: both networks plus everything needed to run them
/// the same way they were trained.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm_scale: f64,
    pub generator: GeneratorParams,
    pub critic: CriticParams,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        let bytes = name.as_bytes();
        self.buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(bytes);
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("truncated checkpoint: need {} bytes", n)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let at = self.pos;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::parse(at, "tensor name is not utf-8"))?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, l) in ckpt.generator.layers.iter().enumerate() {
        out.push((format!("g.{}.kernel", i), &l.kernel));
        out.push((format!("g.{}.bias", i), &l.bias));
    }
    out.push(("g.merge.kernel".to_string(), &ckpt.generator.merge.kernel));
    out.push(("g.merge.bias".to_string(), &ckpt.generator.merge.bias));
    for (i, l) in ckpt.critic.layers.iter().enumerate() {
        out.push((format!("d.{}.kernel", i), &l.kernel));
        out.push((format!("d.{}.bias", i), &l.bias));
    }
    out.push(("d.head_w".to_string(), &ckpt.critic.head_w));
    out.push(("d.head_b".to_string(), &ckpt.critic.head_b));
    out
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let mut flags = 0u8;
        if cfg.vectorial_loss_on {
            flags |= 1;
        }
        if cfg.surface_attention_on {
            flags |= 2;
        }
        if cfg.surface_discrimination_on {
            flags |= 4;
        }
        if cfg.vl_hole_only {
            flags |= 8;
        }
        if cfg.attention.transfer == TransferMode::Blend {
            flags |= 16;
        }
        w.u8(flags);
        w.u32(cfg.width as u32);
        w.u32(cfg.image_size as u32);
        w.u32(cfg.hole_size as u32);
        w.u32(cfg.batch as u32);
        w.u32(cfg.steps as u32);
        w.u32(self.critic.in_channels as u32);
        w.u32(cfg.attention.patch as u32);
        w.u32(cfg.attention.k as u32);
        w.u32(cfg.attention.stride as u32);
        w.f64(cfg.attention.softmax_scale);
        w.f64(cfg.weights.beta);
        w.f64(cfg.weights.phi);
        w.f64(cfg.weights.alpha);
        w.f64(cfg.weights.lambda_gp);
        w.u32(cfg.weights.n_critic as u32);
        w.f64(cfg.lr);
        w.f64(cfg.adam_beta1);
        w.f64(cfg.adam_beta2);
        w.f64(cfg.sigma);
        w.u64(cfg.seed);
        w.f64(self.norm_scale);

        let tensors = named_tensors(self);
        w.u32(tensors.len() as u32);
        for (name, t) in tensors {
            w.tensor(&name, t);
        }
        fs::write(path, w.buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse(0, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(4, format!("unsupported checkpoint version {}", version)));
        }
        let flags = r.u8()?;
        let width = r.u32()? as usize;
        let image_size = r.u32()? as usize;
        let hole_size = r.u32()? as usize;
        let batch = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let patch = r.u32()? as usize;
        let k = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let softmax_scale = r.f64()?;
        let beta = r.f64()?;
        let phi = r.f64()?;
        let alpha = r.f64()?;
        let lambda_gp = r.f64()?;
        let n_critic = r.u32()? as usize;
        let lr = r.f64()?;
        let adam_beta1 = r.f64()?;
        let adam_beta2 = r.f64()?;
        let sigma = r.f64()?;
        let seed = r.u64()?;
        let norm_scale = r.f64()?;

        let config = TrainConfig {
            image_size,
            hole_size,
            batch,
            steps,
            lr,
            adam_beta1,
            adam_beta2,
            weights: LossWeights { beta, phi, alpha, lambda_gp, n_critic },
            seed,
            width,
            vectorial_loss_on: flags & 1 != 0,
            surface_attention_on: flags & 2 != 0,
            surface_discrimination_on: flags & 4 != 0,
            attention: AttentionConfig {
                patch,
                k,
                softmax_scale,
                stride,
                transfer: if flags & 16 != 0 { TransferMode::Blend } else { TransferMode::Argmax },
            },
            vl_hole_only: flags & 8 != 0,
            norm_max: Some(norm_scale),
            sigma,
        };

        let mut generator = GeneratorParams::init(width, seed);
        let mut critic = CriticParams::init(width, in_channels, seed ^ 0x5eed);

        let n_tensors = r.u32()? as usize;
        for _ in 0..n_tensors {
            let at = r.pos;
            let (name, t) = r.tensor()?;
            let slot: &mut Tensor = match name.as_str() {
                "g.merge.kernel" => &mut generator.merge.kernel,
                "g.merge.bias" => &mut generator.merge.bias,
                "d.head_w" => &mut critic.head_w,
                "d.head_b" => &mut critic.head_b,
                other => {
                    let (net, rest) = other.split_at(2);
                    let (idx_s, field) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::parse(at, format!("bad tensor name {:?}", other)))?;
                    let idx: usize = idx_s
                        .parse()
                        .map_err(|_| Error::parse(at, format!("bad tensor name {:?}", other)))?;
                    let layers = match net {
                        "g." => &mut generator.layers,
                        "d." => &mut critic.layers,
                        _ => return Err(Error::parse(at, format!("bad tensor name {:?}", other))),
                    };
                    let layer = layers
                        .get_mut(idx)
                        .ok_or_else(|| Error::parse(at, format!("layer {} out of range", idx)))?;
                    match field {
                        "kernel" => &mut layer.kernel,
                        "bias" => &mut layer.bias,
                        _ => return Err(Error::parse(at, format!("bad tensor name {:?}", other))),
                    }
                }
            };
            if slot.shape() != t.shape() {
                return Err(Error::parse(
                    at,
                    format!(
                        "tensor {:?} shape {:?} does not match architecture {:?}",
                        name,
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
        }

        Ok(Checkpoint { config, norm_scale, generator, critic })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = TrainConfig {
            image_size: 16,
            hole_size: 6,
            width: 4,
            steps: 3,
            seed: 11,
            surface_discrimination_on: false,
            ..TrainConfig::default()
        };
        let ckpt = Checkpoint {
            norm_scale: 17.5,
            generator: GeneratorParams::init(4, 11),
            critic: CriticParams::init(4, 1, 11 ^ 0x5eed),
            config: cfg,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.norm_scale, 17.5);
        assert_eq!(back.config.width, 4);
        assert!(!back.config.surface_discrimination_on);
        assert_eq!(back.critic.in_channels, 1);
        for (a, b) in ckpt
            .generator
            .param_tensors()
            .iter()
            .zip(back.generator.param_tensors())
        {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
        for (a, b) in ckpt.critic.param_tensors().iter().zip(back.critic.param_tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));

        let ckpt = Checkpoint {
            norm_scale: 1.0,
            generator: GeneratorParams::init(4, 1),
            critic: CriticParams::init(4, 4, 2),
            config: TrainConfig { width: 4, ..TrainConfig::default() },
        };
        let good = dir.path().join("good.ckpt");
        ckpt.save(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 11);
        fs::write(&good, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&good), Err(Error::Parse { .. })));
    }
}
