//! Model persistence.
//!
//! File layout (`SGMLP1` format, version 1):
//!
//! ```text
//! magic      8 bytes   "SGMLP1\0\0"
//! version    u16 LE    1
//! header_len u32 LE
//! header     UTF-8 key=value lines: input_dim, hidden_dims, dropout_rates,
//!            output_dim, bn_epsilon, bn_momentum, dataset, seed,
//!            epochs_trained
//! payload    per tensor: u32 LE element count, then that many f32 LE.
//!            Tensor order: per hidden layer weights, bias, gamma, beta,
//!            moving_mean, moving_var; then output weights, bias.
//! checksum   u64 LE    FNV-1a over the payload bytes
//! ```
//!
//! Files are written to a temp path and renamed, so readers never observe a
//! partial file. Saving the same model twice produces identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HiddenLayer, MlpConfig, Model, ModelMeta, OutputLayer};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"SGMLP1\0\0";
const VERSION: u16 = 1;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn header_text(model: &Model) -> String {
    let config = &model.config;
    let join = |v: &[String]| v.join(",");
    format!(
        "input_dim={}\nhidden_dims={}\ndropout_rates={}\noutput_dim={}\nbn_epsilon={}\nbn_momentum={}\ndataset={}\nseed={}\nepochs_trained={}\n",
        config.input_dim,
        join(&config.hidden_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>()),
        join(&config.dropout_rates.iter().map(|p| p.to_string()).collect::<Vec<_>>()),
        config.output_dim,
        config.bn_epsilon,
        config.bn_momentum,
        model.meta.dataset,
        model.meta.seed,
        model.meta.epochs_trained,
    )
}

fn parse_header(text: &str) -> Result<(MlpConfig, ModelMeta)> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::ShapeMismatch(format!("bad header line {line:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::ShapeMismatch(format!("header missing {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::ShapeMismatch(format!("bad {key} in header")))
    };
    let parse_list = |key: &str| -> Result<Vec<String>> {
        let raw = get(key)?;
        if raw.is_empty() {
            Ok(Vec::new())
        } else {
            Ok(raw.split(',').map(str::to_string).collect())
        }
    };

    let hidden_dims = parse_list("hidden_dims")?
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::ShapeMismatch("bad hidden_dims in header".into()))?;
    let dropout_rates = parse_list("dropout_rates")?
        .iter()
        .map(|s| s.parse::<f32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::ShapeMismatch("bad dropout_rates in header".into()))?;

    let config = MlpConfig {
        input_dim: parse_usize("input_dim")?,
        hidden_dims,
        dropout_rates,
        output_dim: parse_usize("output_dim")?,
        bn_epsilon: get("bn_epsilon")?
            .parse()
            .map_err(|_| Error::ShapeMismatch("bad bn_epsilon in header".into()))?,
        bn_momentum: get("bn_momentum")?
            .parse()
            .map_err(|_| Error::ShapeMismatch("bad bn_momentum in header".into()))?,
    };
    let meta = ModelMeta {
        dataset: get("dataset")?.clone(),
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::ShapeMismatch("bad seed in header".into()))?,
        epochs_trained: get("epochs_trained")?
            .parse()
            .map_err(|_| Error::ShapeMismatch("bad epochs_trained in header".into()))?,
    };
    config.validate()?;
    Ok((config, meta))
}

fn tensors(model: &Model) -> Vec<&[f32]> {
    let mut out = Vec::new();
    for layer in &model.hidden {
        out.push(layer.weights.as_slice());
        out.push(layer.bias.as_slice());
        out.push(layer.gamma.as_slice());
        out.push(layer.beta.as_slice());
        out.push(layer.moving_mean.as_slice());
        out.push(layer.moving_var.as_slice());
    }
    out.push(model.output.weights.as_slice());
    out.push(model.output.bias.as_slice());
    out
}

/// Serialize a model. Rewriting the same model yields byte-identical files.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    if model
        .param_slices()
        .iter()
        .any(|s| s.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::DomainError {
            op: "save",
            detail: "model contains non-finite parameters".into(),
        });
    }
    let header = header_text(model);
    let mut payload = Vec::new();
    for t in tensors(model) {
        payload.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for &v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&payload);

    let mut bytes = Vec::with_capacity(8 + 2 + 4 + header.len() + payload.len() + 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&checksum.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct TensorReader<'a> {
    payload: &'a [u8],
    offset: usize,
}

impl<'a> TensorReader<'a> {
    fn next(&mut self, expected_len: usize, what: &str) -> Result<Vec<f32>> {
        if self.offset + 4 > self.payload.len() {
            return Err(Error::ShapeMismatch(format!("payload ends before {what}")));
        }
        let len = u32::from_le_bytes(
            self.payload[self.offset..self.offset + 4]
                .try_into()
                .unwrap(),
        ) as usize;
        self.offset += 4;
        if len != expected_len {
            return Err(Error::ShapeMismatch(format!(
                "{what}: header implies {expected_len} values, payload has {len}"
            )));
        }
        let bytes = len * 4;
        if self.offset + bytes > self.payload.len() {
            return Err(Error::ShapeMismatch(format!("payload ends inside {what}")));
        }
        let mut out = Vec::with_capacity(len);
        for chunk in self.payload[self.offset..self.offset + bytes].chunks_exact(4) {
            out.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        self.offset += bytes;
        Ok(out)
    }
}

/// Restore a model saved by [`save`]. The restored model's eval-mode
/// predictions are bit-identical to the original's.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 + 2 + 4 + 8 {
        return Err(Error::BadMagic { what: "model file" });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic { what: "model file" });
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let header_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let header_end = 14 + header_len;
    if bytes.len() < header_end + 8 {
        return Err(Error::ShapeMismatch("file shorter than header".into()));
    }
    let header = std::str::from_utf8(&bytes[14..header_end])
        .map_err(|_| Error::ShapeMismatch("header is not UTF-8".into()))?;
    let (config, meta) = parse_header(header)?;

    let payload = &bytes[header_end..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::ChecksumMismatch);
    }

    let mut reader = TensorReader { payload, offset: 0 };
    let mut hidden = Vec::with_capacity(config.hidden_dims.len());
    let mut fan_in = config.input_dim;
    for (i, &dim) in config.hidden_dims.iter().enumerate() {
        let weights = Matrix::from_vec(
            fan_in,
            dim,
            reader.next(fan_in * dim, &format!("hidden {i} weights"))?,
        )?;
        hidden.push(HiddenLayer {
            weights,
            bias: reader.next(dim, &format!("hidden {i} bias"))?,
            gamma: reader.next(dim, &format!("hidden {i} gamma"))?,
            beta: reader.next(dim, &format!("hidden {i} beta"))?,
            moving_mean: reader.next(dim, &format!("hidden {i} moving_mean"))?,
            moving_var: reader.next(dim, &format!("hidden {i} moving_var"))?,
        });
        fan_in = dim;
    }
    let output = OutputLayer {
        weights: Matrix::from_vec(
            fan_in,
            config.output_dim,
            reader.next(fan_in * config.output_dim, "output weights")?,
        )?,
        bias: reader.next(config.output_dim, "output bias")?,
    };
    if reader.offset != payload.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} unexpected payload bytes after last tensor",
            payload.len() - reader.offset
        )));
    }

    Ok(Model {
        config,
        hidden,
        output,
        meta,
    })
}
