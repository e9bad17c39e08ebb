//! Binary snapshot of a training run: network structure, every parameter
//! triple (shadow, grid value, scale) with its momentum buffer, batch-norm
//! running statistics, the relaxation schedule position, and the master
//! seed. Restoring a snapshot and continuing reproduces the original run
//! bit for bit because per-epoch randomness is derived from seed and epoch
//! alone.
//!
//! Layout: magic `RBQK`, a u32 version, then length-prefixed fields in
//! fixed order, all little-endian. Floats are stored as raw IEEE bits so
//! round trips are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{BnStat, Network, NetworkSpec};
use crate::quant::{ParamKind, ParamState, QuantState, Scheme};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RBQK";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub bn_stats: BTreeMap<String, BnStat>,
    pub state: QuantState,
    pub seed: u64,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn from_parts(net: &Network, state: &QuantState, seed: u64, config_digest: &str) -> Checkpoint {
        Checkpoint {
            spec: net.spec.clone(),
            bn_stats: net.bn_stats.clone(),
            state: state.clone(),
            seed,
            config_digest: config_digest.to_string(),
        }
    }

    pub fn network(&self) -> Network {
        Network {
            spec: self.spec.clone(),
            bn_stats: self.bn_stats.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_str(&mut buf, &self.config_digest);
        put_u64(&mut buf, self.seed);

        put_u64(&mut buf, self.spec.in_channels as u64);
        put_u64(&mut buf, self.spec.in_h as u64);
        put_u64(&mut buf, self.spec.in_w as u64);
        put_u64(&mut buf, self.spec.classes as u64);
        put_usizes(&mut buf, &self.spec.blocks);
        put_usizes(&mut buf, &self.spec.widths);
        put_u64(&mut buf, self.spec.ensemble as u64);
        put_f64(&mut buf, self.spec.noise_std);
        buf.push(self.spec.batch_norm as u8);

        buf.push(scheme_tag(self.state.scheme));
        put_f64(&mut buf, self.state.lambda);
        put_f64(&mut buf, self.state.rho);
        put_u64(&mut buf, self.state.cutoff_epoch as u64);
        put_u64(&mut buf, self.state.epoch as u64);

        put_u64(&mut buf, self.state.params.len() as u64);
        for p in &self.state.params {
            put_str(&mut buf, &p.name);
            buf.push(kind_tag(p.kind));
            put_usizes(&mut buf, p.shadow.shape());
            put_f64s(&mut buf, p.shadow.data());
            put_f64s(&mut buf, p.quantized.data());
            put_f64(&mut buf, p.scale);
            put_f64s(&mut buf, p.momentum.data());
            buf.push(p.quantize as u8);
        }

        put_u64(&mut buf, self.bn_stats.len() as u64);
        for (name, stat) in &self.bn_stats {
            put_str(&mut buf, name);
            put_f64s(&mut buf, &stat.mean);
            put_f64s(&mut buf, &stat.var);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        let magic = c.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config_digest = c.str_()?;
        let seed = c.u64()?;

        let in_channels = c.u64()? as usize;
        let in_h = c.u64()? as usize;
        let in_w = c.u64()? as usize;
        let classes = c.u64()? as usize;
        let blocks = c.usizes()?;
        let widths = c.usizes()?;
        let ensemble = c.u64()? as usize;
        let noise_std = c.f64()?;
        let batch_norm = c.byte()? != 0;
        let spec = NetworkSpec {
            in_channels,
            in_h,
            in_w,
            classes,
            blocks,
            widths,
            ensemble,
            noise_std,
            batch_norm,
        };

        let scheme = scheme_from_tag(c.byte()?)?;
        let lambda = c.f64()?;
        let rho = c.f64()?;
        let cutoff_epoch = c.u64()? as usize;
        let epoch = c.u64()? as usize;

        let n_params = c.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = c.str_()?;
            let kind = kind_from_tag(c.byte()?)?;
            let shape = c.usizes()?;
            let shadow = Tensor::new(shape.clone(), c.f64s()?)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            let quantized = Tensor::new(shape.clone(), c.f64s()?)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            let scale = c.f64()?;
            let momentum = Tensor::new(shape, c.f64s()?)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            let quantize = c.byte()? != 0;
            params.push(ParamState {
                name,
                kind,
                shadow,
                quantized,
                scale,
                momentum,
                quantize,
            });
        }

        let n_bn = c.u64()? as usize;
        let mut bn_stats = BTreeMap::new();
        for _ in 0..n_bn {
            let name = c.str_()?;
            let mean = c.f64s()?;
            let var = c.f64s()?;
            bn_stats.insert(name, BnStat { mean, var });
        }
        if c.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint {
            spec,
            bn_stats,
            state: QuantState {
                params,
                scheme,
                lambda,
                rho,
                cutoff_epoch,
                epoch,
            },
            seed,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::Float => 0,
        Scheme::Binary => 1,
        Scheme::Ternary => 2,
        Scheme::TernaryThreshold => 3,
        Scheme::FourBit => 4,
    }
}

fn scheme_from_tag(t: u8) -> Result<Scheme> {
    Ok(match t {
        0 => Scheme::Float,
        1 => Scheme::Binary,
        2 => Scheme::Ternary,
        3 => Scheme::TernaryThreshold,
        4 => Scheme::FourBit,
        other => return Err(Error::Format(format!("unknown scheme tag {other}"))),
    })
}

fn kind_tag(k: ParamKind) -> u8 {
    match k {
        ParamKind::ConvWeight => 0,
        ParamKind::LinearWeight => 1,
        ParamKind::Bias => 2,
        ParamKind::BnGamma => 3,
        ParamKind::BnBeta => 4,
    }
}

fn kind_from_tag(t: u8) -> Result<ParamKind> {
    Ok(match t {
        0 => ParamKind::ConvWeight,
        1 => ParamKind::LinearWeight,
        2 => ParamKind::Bias,
        3 => ParamKind::BnGamma,
        4 => ParamKind::BnBeta,
        other => return Err(Error::Format(format!("unknown parameter kind tag {other}"))),
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    put_u64(buf, vs.len() as u64);
    for &v in vs {
        put_f64(buf, v);
    }
}

fn put_usizes(buf: &mut Vec<u8>, vs: &[usize]) {
    put_u64(buf, vs.len() as u64);
    for &v in vs {
        put_u64(buf, v as u64);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str_(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("non-utf8 string".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 + 1 {
            return Err(Error::Format(format!("implausible vector length {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 + 1 {
            return Err(Error::Format(format!("implausible vector length {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.u64()? as usize);
        }
        Ok(out)
    }
}
