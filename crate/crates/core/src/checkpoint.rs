//! Binary checkpoints: a text header with the model config, then named
//! little-endian `f64` tensors for every parameter and buffer.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::layers::{Entry, EntryMut, Module};
use crate::model::{parse_streams, Model, ModelConfig, ModelError};
use crate::tensor::{Real, Value};

pub const CHECKPOINT_MAGIC: &str = "IGCN-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
    #[error("tensor {name}: stored shape {stored:?}, model expects {expected:?}")]
    Shape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

pub fn write_checkpoint<R: Real>(w: &mut impl Write, model: &Model<R>) -> Result<()> {
    let config = toml::to_string(&model.config).map_err(|e| bad(e.to_string()))?;
    let mut records: Vec<(String, Value<R>)> = Vec::new();
    model.visit(&mut |e| match e {
        Entry::Param(p) => records.push((p.name.clone(), p.value.clone())),
        Entry::Buffer(b) => records.push((b.name.clone(), b.value.clone())),
    });
    let streams: String = model.kinds().iter().map(|k| k.letter()).collect();
    writeln!(
        w,
        "{CHECKPOINT_MAGIC} count={} streams={streams} config_bytes={}",
        records.len(),
        config.len()
    )?;
    w.write_all(config.as_bytes())?;
    for (name, value) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in value.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    header
        .split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .ok_or_else(|| bad(format!("header lacks {key}")))
}

pub fn read_checkpoint<R: Real>(r: &mut impl Read) -> Result<Model<R>> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(bad("header too long"));
        }
    }
    let header = String::from_utf8(header).map_err(|_| bad("header is not text"))?;
    if !header.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad(format!("expected {CHECKPOINT_MAGIC:?}")));
    }
    let count: usize = header_field(&header, "count")?.parse().map_err(|_| bad("count"))?;
    let kinds = parse_streams(header_field(&header, "streams")?)?;
    let config_bytes: usize = header_field(&header, "config_bytes")?.parse().map_err(|_| bad("config_bytes"))?;
    let mut config = vec![0u8; config_bytes];
    r.read_exact(&mut config)?;
    let config = String::from_utf8(config).map_err(|_| bad("config is not text"))?;
    let config = ModelConfig::from_toml_str(&config)?;

    let mut stored: HashMap<String, (Vec<usize>, Vec<R>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not text"))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| R::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        stored.insert(name, (shape, data));
    }

    let mut model = Model::<R>::new(&config, &kinds, 0)?;
    let mut err = None;
    model.visit_mut(&mut |e| {
        if err.is_some() {
            return;
        }
        let (name, value) = match e {
            EntryMut::Param(p) => (&p.name, &mut p.value),
            EntryMut::Buffer(b) => (&b.name, &mut b.value),
        };
        match stored.remove(name) {
            None => err = Some(CheckpointError::Missing(name.clone())),
            Some((shape, _)) if shape != value.shape() => {
                err = Some(CheckpointError::Shape {
                    name: name.clone(),
                    stored: shape,
                    expected: value.shape().to_vec(),
                })
            }
            Some((_, data)) => value.data_mut().copy_from_slice(&data),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save<R: Real>(path: &Path, model: &Model<R>) -> Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load<R: Real>(path: &Path) -> Result<Model<R>> {
    read_checkpoint(&mut io::BufReader::new(std::fs::File::open(path)?))
}
