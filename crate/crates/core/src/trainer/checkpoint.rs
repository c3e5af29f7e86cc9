//! Resumable training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SDCK" | version u32 | endian tag u32 | sections...
//! section = tag [u8; 4] | length u64 | body
//! SPEC  model spec text
//! CONF  optimizer config, key=value lines
//! DATA  augmentation and normalization, key=value lines
//! PARM  count u32, then per parameter: name str, class str, learnable u8, dims, values f32s
//! BNST  count u32, then per layer: running mean f32s, running var f32s, momentum f32, eps f32
//! OPTM  algorithm str, t u64, m buffers (count u32 + f32s each), v buffers likewise
//! STAT  completed epochs u64, completed steps u64
//! HIST  metric log text
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8; float arrays are a u32
//! element count followed by the values. Every random stream of a run is
//! derived from the configured seed and the epoch/step counters, so these
//! sections are the complete state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::codec::{Reader, Writer};
use super::{OptimConfig, Optimizer, TrainState, Trainer};
use crate::autograd::ParamClass;
use crate::data::{AugmentConfig, Normalization};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::tensor::{BnState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn data_text(augment: &AugmentConfig, norm: &Normalization) -> String {
    let (mean, std) = norm.to_strings();
    format!(
        "crop_pad={}\nflip={}\nnorm_mean={mean}\nnorm_std={std}\n",
        augment.crop_pad,
        if augment.flip { "on" } else { "off" }
    )
}

fn parse_data(text: &str) -> Result<(AugmentConfig, Normalization)> {
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("checkpoint data section lacks {k}")));
    let crop_pad = get("crop_pad")?.parse().map_err(|_| Error::Format("bad crop_pad".into()))?;
    let flip = get("flip")? == "on";
    Ok((AugmentConfig { crop_pad, flip }, Normalization::parse(get("norm_mean")?, get("norm_std")?)?))
}

pub fn save_checkpoint(t: &Trainer) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.section(b"SPEC", t.model.spec().to_text().as_bytes());
    w.section(b"CONF", t.cfg.to_text().as_bytes());
    w.section(b"DATA", data_text(&t.augment, &t.norm).as_bytes());

    let mut b = Writer::default();
    b.u32(t.model.params.len() as u32);
    for (_, p) in t.model.params.iter() {
        b.str(&p.name);
        b.str(p.class.as_str());
        b.u8(p.learnable as u8);
        b.dims(p.value.shape());
        b.f32s(p.value.data());
    }
    w.section(b"PARM", &b.buf);

    let mut b = Writer::default();
    b.u32(t.model.bn_states.len() as u32);
    for s in &t.model.bn_states {
        b.f32s(&s.running_mean);
        b.f32s(&s.running_var);
        b.f32(s.momentum);
        b.f32(s.eps);
    }
    w.section(b"BNST", &b.buf);

    let o = &t.state.optimizer;
    let mut b = Writer::default();
    b.str(&o.algorithm.to_string());
    b.u64(o.t);
    for bufs in [&o.m, &o.v] {
        b.u32(bufs.len() as u32);
        for m in bufs {
            b.f32s(m);
        }
    }
    w.section(b"OPTM", &b.buf);

    let mut b = Writer::default();
    b.u64(t.state.epoch as u64);
    b.u64(t.state.step);
    w.section(b"STAT", &b.buf);

    let mut hist = t.state.log.join("\n");
    if !hist.is_empty() {
        hist.push('\n');
    }
    w.section(b"HIST", hist.as_bytes());
    w.buf
}

fn text(body: &[u8], what: &str) -> Result<String> {
    String::from_utf8(body.to_vec()).map_err(|_| Error::Format(format!("checkpoint {what} section is not UTF-8")))
}

/// Rebuilds a trainer. With `expect`, the stored spec must match it.
pub fn load_checkpoint(bytes: &[u8], expect: Option<&ModelSpec>) -> Result<Trainer> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let spec = ModelSpec::parse(&text(r.expect(b"SPEC")?, "spec")?)?;
    if let Some(e) = expect {
        if e != &spec {
            return Err(Error::Format(format!(
                "checkpoint holds model {:?}, which does not match the requested spec {:?}",
                spec.name, e.name
            )));
        }
    }
    let cfg = OptimConfig::from_text(&text(r.expect(b"CONF")?, "config")?)?;
    let (augment, norm) = parse_data(&text(r.expect(b"DATA")?, "data")?)?;
    let mut model = Model::<f32>::build(&spec, 0)?;

    let mut b = Reader::new(r.expect(b"PARM")?, "checkpoint parameters");
    let n = b.u32()? as usize;
    if n != model.params.len() {
        return Err(b.err(format!("{n} parameters stored, model has {}", model.params.len())));
    }
    for p in model.params.iter_mut() {
        let name = b.str()?;
        let class = b.str()?;
        let learnable = b.u8()? != 0;
        let dims = b.dims()?;
        let values = b.f32s()?;
        if name != p.name || ParamClass::parse(&class) != Some(p.class) || dims != p.value.shape() {
            return Err(b.err(format!(
                "parameter {name} ({class}, {dims:?}) does not match {} ({}, {:?})",
                p.name,
                p.class,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(dims, values)?;
        p.learnable = learnable;
    }
    b.finish()?;

    let mut b = Reader::new(r.expect(b"BNST")?, "checkpoint bn state");
    let n = b.u32()? as usize;
    if n != model.bn_states.len() {
        return Err(b.err(format!("{n} bn states stored, model has {}", model.bn_states.len())));
    }
    for s in model.bn_states.iter_mut() {
        let st = BnState { running_mean: b.f32s()?, running_var: b.f32s()?, momentum: b.f32()?, eps: b.f32()? };
        if st.channels() != s.channels() || st.running_var.len() != s.channels() {
            return Err(b.err("bn state has the wrong channel count"));
        }
        *s = st;
    }
    b.finish()?;

    let mut b = Reader::new(r.expect(b"OPTM")?, "checkpoint optimizer");
    let algorithm = b.str()?.parse()?;
    let t = b.u64()?;
    let mut bufs = [Vec::new(), Vec::new()];
    for slot in bufs.iter_mut() {
        let k = b.u32()? as usize;
        for _ in 0..k {
            slot.push(b.f32s()?);
        }
    }
    b.finish()?;
    let [m, v] = bufs;
    let optimizer = Optimizer { algorithm, t, m, v };
    let fresh = Optimizer::new(&cfg, &model.params);
    let same_layout = |a: &[Vec<f32>], b: &[Vec<f32>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
    if optimizer.algorithm != cfg.algorithm || !same_layout(&optimizer.m, &fresh.m) || !same_layout(&optimizer.v, &fresh.v) {
        return Err(Error::Format("checkpoint optimizer state does not fit the model".into()));
    }

    let mut b = Reader::new(r.expect(b"STAT")?, "checkpoint counters");
    let epoch = b.u64()? as usize;
    let step = b.u64()?;
    b.finish()?;
    let log = text(r.expect(b"HIST")?, "history")?.lines().map(str::to_string).collect();
    r.finish()?;

    Ok(Trainer { model, cfg, augment, norm, state: TrainState { epoch, step, optimizer, log } })
}

pub fn write_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    fs::write(path, save_checkpoint(t))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, expect: Option<&ModelSpec>) -> Result<Trainer> {
    load_checkpoint(&fs::read(path)?, expect)
}
