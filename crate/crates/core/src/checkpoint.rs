//! Binary training checkpoints.
//!
//! ```text
//! "MTGC" | version u16 | reserved u16 | header_len u32 | JSON header | f64 LE tensors
//! ```
//!
//! The header holds the config text, speaker index, counters, loss history
//! and the name and length of every tensor in data order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::featio::write_atomic;
use crate::losses::LossComponents;
use crate::nets::{init_params, Networks};
use crate::nn::{Adam, Sequential};
use crate::trainer::{LossRecord, Optimizers, Trainer};

const MAGIC: &[u8; 4] = b"MTGC";
const VERSION: u16 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    speakers: Vec<String>,
    step: u64,
    epoch: u64,
    cursor: u64,
    /// Adam step counters: encoder, generator, critic, classifier.
    adam_t: [u64; 4],
    /// `[step, epoch, L_T, L_S, L_G, L_D, total]` per step.
    history: Vec<(u64, u64, f64, f64, f64, f64, f64)>,
    tensors: Vec<TensorEntry>,
}

const NETS: [&str; 4] = ["encoder", "generator", "critic", "classifier"];

fn groups(nets: &Networks, opt: &Optimizers) -> [(&'static str, Vec<(String, Vec<f64>)>); 4] {
    let collect = |name: &'static str, net: &Sequential, adam: &Adam| {
        let mut out = Vec::new();
        for (i, p) in net.params().iter().enumerate() {
            out.push((format!("{name}.param.{i}"), p.to_vec()));
        }
        for (i, b) in net.buffers().iter().enumerate() {
            out.push((format!("{name}.buffer.{i}"), b.to_vec()));
        }
        for (i, m) in adam.m.iter().enumerate() {
            out.push((format!("{name}.adam_m.{i}"), m.clone()));
        }
        for (i, v) in adam.v.iter().enumerate() {
            out.push((format!("{name}.adam_v.{i}"), v.clone()));
        }
        (name, out)
    };
    [
        collect(NETS[0], &nets.encoder.net, &opt.encoder),
        collect(NETS[1], &nets.generator.net, &opt.generator),
        collect(NETS[2], &nets.critic.net, &opt.critic),
        collect(NETS[3], &nets.classifier.net, &opt.classifier),
    ]
}

pub fn encode(t: &Trainer) -> Vec<u8> {
    let tensors: Vec<(String, Vec<f64>)> = groups(&t.nets, &t.opt).into_iter().flat_map(|(_, g)| g).collect();
    let header = Header {
        config: t.config.to_text(),
        speakers: t.speakers.clone(),
        step: t.step,
        epoch: t.epoch,
        cursor: t.cursor,
        adam_t: [t.opt.encoder.t, t.opt.generator.t, t.opt.critic.t, t.opt.classifier.t],
        history: t
            .history
            .iter()
            .map(|r| {
                let c = &r.components;
                (r.step, r.epoch, c.triplet, c.softmax, c.generator, c.critic, r.total)
            })
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + tensors.iter().map(|t| t.1.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in &tensors {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], name: &str) -> Result<Trainer> {
    let err = |offset: usize, reason: String| Error::Parse {
        file: name.to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < PREFIX_LEN {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < PREFIX_LEN + hlen {
        return Err(err(bytes.len(), format!("truncated: header needs {hlen} bytes")));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + hlen])
        .map_err(|e| err(PREFIX_LEN + e.column().saturating_sub(1), format!("header: {e}")))?;
    let config = TrainConfig::parse(&header.config)?;
    let mut nets = init_params(&config.arch, header.speakers.len(), config.seed)?;
    let mut opt = Optimizers::new(&config, &nets);

    let expected = groups(&nets, &opt);
    let expected: Vec<(String, usize)> =
        expected.into_iter().flat_map(|(_, g)| g.into_iter().map(|(n, v)| (n, v.len()))).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} tensors, checkpoint has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((n, len), t) in expected.iter().zip(&header.tensors) {
        if *n != t.name || *len != t.len {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} has {} values, expected {n} with {len}",
                t.name, t.len
            )));
        }
    }
    let total: usize = expected.iter().map(|e| e.1).sum();
    let data_at = PREFIX_LEN + hlen;
    if bytes.len() != data_at + total * 8 {
        return Err(err(
            bytes.len().min(data_at + total * 8),
            format!("expected {} data bytes, found {}", total * 8, bytes.len() - data_at),
        ));
    }
    let mut values = bytes[data_at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = values.next().expect("length checked"));
    let pairs: [(&mut Sequential, &mut Adam); 4] = [
        (&mut nets.encoder.net, &mut opt.encoder),
        (&mut nets.generator.net, &mut opt.generator),
        (&mut nets.critic.net, &mut opt.critic),
        (&mut nets.classifier.net, &mut opt.classifier),
    ];
    for (i, (net, adam)) in pairs.into_iter().enumerate() {
        net.params_mut().into_iter().for_each(&mut fill);
        net.buffers_mut().into_iter().for_each(&mut fill);
        adam.m.iter_mut().for_each(|m| fill(m));
        adam.v.iter_mut().for_each(|v| fill(v));
        adam.t = header.adam_t[i];
    }
    let history = header
        .history
        .iter()
        .map(|&(step, epoch, t, s, g, d, total)| LossRecord {
            step,
            epoch,
            components: LossComponents {
                triplet: t,
                softmax: s,
                generator: g,
                critic: d,
            },
            total,
        })
        .collect();
    Ok(Trainer {
        config,
        nets,
        opt,
        step: header.step,
        epoch: header.epoch,
        cursor: header.cursor,
        history,
        speakers: header.speakers,
    })
}

/// Write atomically (temp file, then rename).
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
