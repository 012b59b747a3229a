//! `RSNN` checkpoint container.
//!
//! Little-endian: magic `RSNN`, u16 version, u32 layer count, then per layer
//! u32 fan_in, u32 fan_out, row-major f64 weights, f64 thresholds. Then a
//! u64 length and the hyperparameters in the config grammar. Then a u8 flag;
//! when set, the Adam step counter (u64) and per layer the weight moments
//! (m, v) followed by the threshold moments (m, v), all f64.

use std::fs;
use std::path::Path;

use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::neuron::LayerParams;
use crate::optim::{AdamState, Moments};
use crate::scalar::{Matrix, Scalar};

pub const MAGIC: &[u8; 4] = b"RSNN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: Network<T>,
    pub optimizer: Option<AdamState<T>>,
}

fn put_f64s<T: Scalar>(buf: &mut Vec<u8>, vals: &[T]) {
    for v in vals {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn encode<T: Scalar>(net: &Network<T>, optimizer: Option<&AdamState<T>>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        buf.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        put_f64s(&mut buf, l.weights.as_slice());
        put_f64s(&mut buf, &l.thresholds);
    }
    let cfg = net.hp.to_config_string();
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    match optimizer {
        None => buf.push(0),
        Some(st) => {
            buf.push(1);
            buf.extend_from_slice(&st.step.to_le_bytes());
            for (w, t) in st.weights.iter().zip(&st.thresholds) {
                put_f64s(&mut buf, &w.m);
                put_f64s(&mut buf, &w.v);
                put_f64s(&mut buf, &t.m);
                put_f64s(&mut buf, &t.v);
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("checkpoint size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let fan_in = r.u32()? as usize;
        let fan_out = r.u32()? as usize;
        let n = fan_in
            .checked_mul(fan_out)
            .ok_or_else(|| Error::Format("layer size overflow".into()))?;
        let weights = Matrix::from_vec(fan_out, fan_in, r.f64s(n)?).unwrap();
        layers.push(LayerParams::new(weights, r.f64s(fan_out)?)?);
    }
    let cfg_len = r.u64()? as usize;
    let cfg = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let hp = Hyperparams::parse(cfg)?;
    let net = Network::from_layers(layers, hp)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut st = AdamState::new(&net);
            st.step = step;
            for (l, layer) in net.layers.iter().enumerate() {
                let nw = layer.weights.as_slice().len();
                let nt = layer.thresholds.len();
                st.weights[l] = Moments {
                    m: r.f64s(nw)?,
                    v: r.f64s(nw)?,
                };
                st.thresholds[l] = Moments {
                    m: r.f64s(nt)?,
                    v: r.f64s(nt)?,
                };
            }
            Some(st)
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { net, optimizer })
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    net: &Network<T>,
    optimizer: Option<&AdamState<T>>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
