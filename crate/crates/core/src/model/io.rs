//! Weight file format.
//!
//! A weight file is a text manifest followed by a binary payload:
//!
//! ```text
//! actsparse-weights 1
//! tensor <name> shape=<d0>x<d1> offset=<u64> length=<u64> crc32=<8 hex digits>
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are byte offsets into the payload, which starts right after the
//! `end\n` line. Tensors are stored as little-endian `f32` in row-major
//! order and the CRC32 covers exactly `length` payload bytes. The model
//! configuration lives in a sidecar text file of `key=value` lines next to
//! the weights (see [`config_path`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{Matrix, Scalar};

use super::{Block, LayerKind, ModelConfig, ToyTransformer};

const MAGIC: &str = "actsparse-weights 1";

/// `model.bin` -> `model.config`.
pub fn config_path(weights: &Path) -> PathBuf {
    weights.with_extension("config")
}

struct Entry {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    crc: u32,
}

fn tensors<T: Scalar>(model: &ToyTransformer<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    let mat = |m: &Matrix<T>| vec![m.rows(), m.cols()];
    out.push(("embed".into(), mat(&model.embed), model.embed.data()));
    for (b, block) in model.blocks.iter().enumerate() {
        out.push((format!("blocks.{b}.attn_norm"), vec![block.attn_norm.len()], &block.attn_norm));
        out.push((format!("blocks.{b}.mlp_norm"), vec![block.mlp_norm.len()], &block.mlp_norm));
        for kind in LayerKind::ALL {
            let w = block.layer(kind).weight();
            out.push((format!("blocks.{b}.{}", kind.name()), mat(w), w.data()));
        }
    }
    out.push(("final_norm".into(), vec![model.final_norm.len()], &model.final_norm));
    let head = model.lm_head.weight();
    out.push(("lm_head".into(), mat(head), head.data()));
    out
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, cfg.d_model])];
    for b in 0..cfg.n_blocks {
        out.push((format!("blocks.{b}.attn_norm"), vec![cfg.d_model]));
        out.push((format!("blocks.{b}.mlp_norm"), vec![cfg.d_model]));
        for kind in LayerKind::ALL {
            let (o, i) = cfg.layer_shape(kind);
            out.push((format!("blocks.{b}.{}", kind.name()), vec![o, i]));
        }
    }
    out.push(("final_norm".into(), vec![cfg.d_model]));
    out.push(("lm_head".into(), vec![cfg.vocab_size, cfg.d_model]));
    out
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn encode_config(cfg: &ModelConfig) -> String {
    format!(
        "n_blocks={}\nd_model={}\nn_heads={}\nd_ff={}\nvocab_size={}\nmax_seq={}\nrms_eps={:?}\n",
        cfg.n_blocks, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size, cfg.max_seq, cfg.rms_eps
    )
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("model config", format!("expected key=value, got `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn take<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V> {
        let raw = kv.get(key).ok_or_else(|| Error::format("model config", format!("missing `{key}`")))?;
        raw.parse().map_err(|_| Error::format("model config", format!("bad value for `{key}`: {raw}")))
    }
    let cfg = ModelConfig {
        n_blocks: take(&kv, "n_blocks")?,
        d_model: take(&kv, "d_model")?,
        n_heads: take(&kv, "n_heads")?,
        d_ff: take(&kv, "d_ff")?,
        vocab_size: take(&kv, "vocab_size")?,
        max_seq: take(&kv, "max_seq")?,
        rms_eps: take(&kv, "rms_eps")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_weights<T: Scalar>(model: &ToyTransformer<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    let mut payload = Vec::new();
    for (name, shape, data) in tensors(model) {
        let offset = payload.len() as u64;
        for v in data {
            payload.extend_from_slice(&(v.to_acc() as f32).to_le_bytes());
        }
        let length = payload.len() as u64 - offset;
        let crc = crc32fast::hash(&payload[offset as usize..]);
        let _ = writeln!(
            header,
            "tensor {name} shape={} offset={offset} length={length} crc32={crc:08x}",
            shape_str(&shape)
        );
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

fn parse_manifest(bytes: &[u8]) -> Result<(BTreeMap<String, Entry>, &[u8])> {
    let bad = |reason: String| Error::format("weight manifest", reason);
    let mut entries = BTreeMap::new();
    let mut pos = 0usize;
    let mut first = true;
    loop {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated manifest".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != MAGIC {
                return Err(bad(format!("unexpected header `{line}`")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(bad(format!("unexpected line `{line}`")));
        }
        let name = parts.next().ok_or_else(|| bad("tensor line without name".into()))?.to_string();
        let mut fields = BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::tensor(&name, format!("bad field `{p}`")))?;
            fields.insert(k, v);
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| Error::tensor(&name, format!("missing `{k}`")));
        let num = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| Error::tensor(&name, format!("bad `{k}`")))
        };
        let shape = field("shape")?
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::tensor(&name, "bad shape")))
            .collect::<Result<Vec<_>>>()?;
        let crc = u32::from_str_radix(field("crc32")?, 16).map_err(|_| Error::tensor(&name, "bad crc32"))?;
        let entry = Entry { shape, offset: num("offset")?, length: num("length")?, crc };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(Error::tensor(&name, "listed twice"));
        }
    }
    Ok((entries, &bytes[pos..]))
}

pub fn decode_model<T: Scalar>(cfg: ModelConfig, bytes: &[u8]) -> Result<ToyTransformer<T>> {
    cfg.validate()?;
    let (mut entries, payload) = parse_manifest(bytes)?;
    let mut loaded: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (name, shape) in expected_shapes(&cfg) {
        let e = entries.remove(&name).ok_or_else(|| Error::tensor(&name, "missing from manifest"))?;
        if e.shape != shape {
            return Err(Error::tensor(
                &name,
                format!("manifest shape {} disagrees with config shape {}", shape_str(&e.shape), shape_str(&shape)),
            ));
        }
        let numel: usize = shape.iter().product();
        if e.length != (numel * 4) as u64 {
            return Err(Error::tensor(&name, format!("length {} != {} bytes for its shape", e.length, numel * 4)));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
        let end = end.ok_or_else(|| Error::tensor(&name, "payload truncated"))? as usize;
        let raw = &payload[e.offset as usize..end];
        if crc32fast::hash(raw) != e.crc {
            return Err(Error::tensor(&name, "checksum mismatch"));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| T::from_acc(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        loaded.insert(name, values);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::tensor(extra, "not part of the configured model"));
    }

    let mut take = |name: &str| loaded.remove(name).expect("checked above");
    let embed = Matrix::from_vec(cfg.vocab_size, cfg.d_model, take("embed"))?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let attn_norm = take(&format!("blocks.{b}.attn_norm"));
        let mlp_norm = take(&format!("blocks.{b}.mlp_norm"));
        let weights = LayerKind::ALL
            .iter()
            .map(|k| {
                let (o, i) = cfg.layer_shape(*k);
                Matrix::from_vec(o, i, take(&format!("blocks.{b}.{}", k.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(Block::new(attn_norm, mlp_norm, weights)?);
    }
    let final_norm = take("final_norm");
    let lm_head = Matrix::from_vec(cfg.vocab_size, cfg.d_model, take("lm_head"))?;
    ToyTransformer::new(cfg, embed, blocks, final_norm, lm_head)
}

/// Writes the weights to `path` and the config to [`config_path`]`(path)`.
pub fn save_model<T: Scalar>(model: &ToyTransformer<T>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_weights(model))?;
    atomic_write(&config_path(path), encode_config(&model.config).as_bytes())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ToyTransformer<T>> {
    let cfg = parse_config(&std::fs::read_to_string(config_path(path))?)?;
    decode_model(cfg, &std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_toy_model;

    fn tiny() -> ModelConfig {
        ModelConfig { n_blocks: 2, d_model: 8, n_heads: 2, d_ff: 12, vocab_size: 256, max_seq: 16, rms_eps: 1e-5 }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let m = init_toy_model::<f32>(&tiny(), 1).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model::<f32>(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(encode_weights(&m), encode_weights(&back));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = init_toy_model::<f32>(&tiny(), 1).unwrap();
        let bytes = encode_weights(&m);
        let err = decode_model::<f32>(tiny(), &bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(&err, Error::Tensor { tensor, .. } if tensor == "lm_head"), "{err}");
        assert!(decode_model::<f32>(tiny(), &bytes[..20]).is_err());
    }

    #[test]
    fn shape_disagreement_names_tensor() {
        let m = init_toy_model::<f32>(&tiny(), 1).unwrap();
        let bytes = encode_weights(&m);
        let mut cfg = tiny();
        cfg.d_ff = 16;
        let err = decode_model::<f32>(cfg, &bytes).unwrap_err();
        assert!(matches!(&err, Error::Tensor { tensor, .. } if tensor == "blocks.0.gate_proj"), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let m = init_toy_model::<f32>(&tiny(), 1).unwrap();
        let mut bytes = encode_weights(&m);
        let n = bytes.len();
        bytes[n - 1] ^= 0x55;
        let err = decode_model::<f32>(tiny(), &bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn config_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(parse_config(&encode_config(&cfg)).unwrap(), cfg);
        assert!(parse_config("n_blocks=2\n").is_err());
    }
}
