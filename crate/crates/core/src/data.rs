//! Calibration corpus ingestion and activation capture.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::BlockCalibCache;
use crate::error::{Error, Result};
use crate::kernels::MacCounter;
use crate::model::{run_blocks, tokenizer, ToyTransformer};
use crate::numerics::{Matrix, Scalar};

/// Byte ranges `[start, end)` taken from one input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub ranges: Vec<[u64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub manifest: Vec<ManifestEntry>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Builds a set from in-memory text, one window per chunk of `seq_len`
    /// bytes. Mostly useful in tests.
    pub fn from_text(text: &str, seq_len: usize, max_sequences: usize) -> Self {
        let sequences: Vec<Vec<u32>> = text
            .as_bytes()
            .chunks(seq_len.max(1))
            .filter(|c| c.len() == seq_len || text.len() < seq_len)
            .take(max_sequences)
            .map(tokenizer::encode)
            .collect();
        let ranges = (0..sequences.len() as u64)
            .map(|i| [i * seq_len as u64, i * seq_len as u64 + sequences[i as usize].len() as u64])
            .collect();
        CalibrationSet { sequences, manifest: vec![ManifestEntry { path: "<memory>".into(), ranges }], seed: 0 }
    }
}

fn collect_files(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = walkdir::WalkDir::new(p)
                .sort_by_file_name()
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect();
            files.append(&mut found);
        } else {
            files.push(p.clone());
        }
    }
    files
}

fn windows(len: usize, seq_len: usize) -> Vec<(usize, usize)> {
    let full = len / seq_len;
    if full == 0 && len > 0 {
        return vec![(0, len)];
    }
    (0..full).map(|i| (i * seq_len, (i + 1) * seq_len)).collect()
}

/// Largest-remainder split of `total` proportional to `weights`.
fn proportional_quotas(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - quotas.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if quotas[i] < weights[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Samples up to `max_sequences` non-overlapping `seq_len`-byte windows from
/// the given files (directories are walked in name order). Each file gets a
/// quota proportional to its window count and windows within a file are
/// sampled uniformly without replacement.
pub fn ingest_corpus(paths: &[PathBuf], max_sequences: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if seq_len == 0 || max_sequences == 0 {
        return Err(Error::invalid("seq_len and max_sequences must be positive"));
    }
    let mut sources: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for file in collect_files(paths) {
        match std::fs::read(&file) {
            Ok(bytes) if !bytes.is_empty() => sources.push((file, bytes)),
            Ok(_) => {}
            Err(e) => log::warn!("skipping {}: {e}", file.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::NoInput(paths.to_vec()));
    }

    let per_file: Vec<Vec<(usize, usize)>> = sources.iter().map(|(_, b)| windows(b.len(), seq_len)).collect();
    let available: usize = per_file.iter().map(Vec::len).sum();
    if available < max_sequences {
        log::warn!("requested {max_sequences} sequences but only {available} windows exist");
    }
    let quotas = proportional_quotas(&per_file.iter().map(Vec::len).collect::<Vec<_>>(), max_sequences.min(available));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::new();
    let mut manifest = Vec::new();
    for (((path, bytes), wins), quota) in sources.iter().zip(&per_file).zip(quotas) {
        if quota == 0 {
            continue;
        }
        let mut picked = rand::seq::index::sample(&mut rng, wins.len(), quota).into_vec();
        picked.sort_unstable();
        let mut ranges = Vec::with_capacity(quota);
        for i in picked {
            let (s, e) = wins[i];
            sequences.push(tokenizer::encode(&bytes[s..e]));
            ranges.push([s as u64, e as u64]);
        }
        manifest.push(ManifestEntry { path: display_path(path), ranges });
    }
    Ok(CalibrationSet { sequences, manifest, seed })
}

fn display_path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Dense activations of the calibration set, captured once and reused by
/// every search.
#[derive(Clone, Debug)]
pub struct CalibrationCache<T> {
    pub sequences: Vec<Vec<u32>>,
    pub blocks: Vec<BlockCalibCache<T>>,
    pub dense_logits: Vec<Matrix<T>>,
}

impl<T: Scalar> CalibrationCache<T> {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// One dense forward per sequence, recording each block's inputs and
/// outputs and the final logits.
pub fn capture_block_inputs<T: Scalar>(
    model: &ToyTransformer<T>,
    calib: &CalibrationSet,
) -> Result<CalibrationCache<T>> {
    if calib.sequences.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let xs = calib
        .sequences
        .iter()
        .map(|s| {
            model.check_tokens(s)?;
            model.embed_tokens(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::with_capacity(model.config().n_blocks);
    let hidden = run_blocks(
        model,
        xs,
        0..model.config().n_blocks,
        None,
        None,
        None,
        &mut MacCounter::default(),
        |_, acts| {
            blocks.push(BlockCalibCache { inputs: acts.input.clone(), dense_out: acts.output.clone() });
        },
    )?;
    let dense_logits = hidden.iter().map(|h| model.logits(h)).collect::<Result<Vec<_>>>()?;
    Ok(CalibrationCache { sequences: calib.sequences.clone(), blocks, dense_logits })
}
