//! Binary network files and loss-trace CSV.
//!
//! Layout, all little-endian: magic `BMQN`, `u32` version, `u32` state_dim,
//! n_actions, channels, use_budget; two `f64` for the budget input range;
//! `u32` count then widths of the encoder
//! layers and of the trunk layers (output included); `u32` normalizer flag
//! followed by `channels` means and stds; then every layer's weights
//! (row-major, in x out) and biases as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, Normalizer, QNetwork};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BMQN";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("network file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 1 << 16 {
            return Err(Error::Format("implausible layer count".into()));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn to_bytes(net: &QNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, net.state_dim());
    put_u32(&mut out, crate::qfunc::BiQFunction::n_actions(net));
    put_u32(&mut out, net.channels());
    put_u32(&mut out, net.uses_budget() as usize);
    net.budget_range()
        .iter()
        .for_each(|x| put_f64(&mut out, *x));
    for group in [net.encoder(), net.trunk()] {
        put_u32(&mut out, group.len());
        for l in group {
            put_u32(&mut out, l.b.len());
        }
    }
    match net.normalizer() {
        Some(n) => {
            put_u32(&mut out, 1);
            n.mean
                .iter()
                .chain(&n.std)
                .for_each(|x| put_f64(&mut out, *x));
        }
        None => put_u32(&mut out, 0),
    }
    for l in net.layers() {
        l.w.iter()
            .chain(l.b.iter())
            .for_each(|x| put_f64(&mut out, *x));
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<QNetwork> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a network file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported network file version {version}"
        )));
    }
    let state_dim = r.u32()?;
    let n_actions = r.u32()?;
    let channels = r.u32()?;
    let use_budget = r.u32()? != 0;
    let budget_range = [r.f64()?, r.f64()?];
    let enc_w = r.widths()?;
    let trunk_w = r.widths()?;
    if trunk_w.last() != Some(&(channels * n_actions)) {
        return Err(Error::Format("output width does not match heads".into()));
    }
    let normalizer = if r.u32()? != 0 {
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(Normalizer { mean, std })
    } else {
        None
    };
    let mut read_layer = |fan_in: usize, fan_out: usize| -> Result<Dense> {
        let w = (0..fan_in * fan_out)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        let b = (0..fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Dense {
            w: Array2::from_shape_vec((fan_in, fan_out), w).unwrap(),
            b: Array1::from(b),
        })
    };
    let mut encoder = Vec::new();
    let mut width = usize::from(use_budget);
    for &w in &enc_w {
        encoder.push(read_layer(width, w)?);
        width = w;
    }
    let mut trunk = Vec::new();
    let mut width = state_dim + if use_budget { width } else { 0 };
    for &w in &trunk_w {
        trunk.push(read_layer(width, w)?);
        width = w;
    }
    if r.pos != buf.len() {
        return Err(Error::Format(
            "trailing bytes after network parameters".into(),
        ));
    }
    Ok(QNetwork::from_parts(
        state_dim,
        n_actions,
        channels,
        use_budget,
        budget_range,
        encoder,
        trunk,
        normalizer,
    ))
}

pub fn save(net: &QNetwork, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<QNetwork> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn write_loss_trace(trace: &[f64], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{l:e}")?;
    }
    Ok(())
}
