//! Held-out evaluation, per-block sensitivity sweeps and decode benchmarks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::allocate::mean_sequence_kl;
use crate::calibrate::BlockEvaluator;
use crate::data::CalibrationCache;
use crate::error::{Error, Result};
use crate::kernels::MacCounter;
use crate::model::{run_blocks, DecodeSession, ToyTransformer};
use crate::numerics::{log_softmax_at, Matrix, Scalar};
use crate::scoring::ModelSparsity;

/// Which prompt positions run sparsified. Generated tokens always do.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrefillPolicy {
    FirstHalf,
    #[default]
    SecondHalf,
    All,
    None,
}

impl PrefillPolicy {
    /// `true` for each of `len` prompt positions that is sparsified. The
    /// split point is `len / 2`.
    pub fn positions(self, len: usize) -> Vec<bool> {
        let split = len / 2;
        (0..len)
            .map(|i| match self {
                PrefillPolicy::FirstHalf => i < split,
                PrefillPolicy::SecondHalf => i >= split,
                PrefillPolicy::All => true,
                PrefillPolicy::None => false,
            })
            .collect()
    }
}

impl FromStr for PrefillPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_half" => Ok(PrefillPolicy::FirstHalf),
            "second_half" => Ok(PrefillPolicy::SecondHalf),
            "all" => Ok(PrefillPolicy::All),
            "none" => Ok(PrefillPolicy::None),
            _ => Err(Error::invalid(format!("unknown prefill policy `{s}`"))),
        }
    }
}

impl fmt::Display for PrefillPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrefillPolicy::FirstHalf => "first_half",
            PrefillPolicy::SecondHalf => "second_half",
            PrefillPolicy::All => "all",
            PrefillPolicy::None => "none",
        })
    }
}

/// Teacher-forced perplexity: `exp` of the mean next-token negative log
/// likelihood over every position that has a successor.
pub fn perplexity<T: Scalar>(seqs: &[Vec<u32>], logits: &[Matrix<T>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for (seq, l) in seqs.iter().zip(logits) {
        for t in 0..seq.len().saturating_sub(1) {
            nll -= log_softmax_at(l.row(t), seq[t + 1] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("perplexity needs sequences of at least two tokens"));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dense_ppl: f64,
    pub sparse_ppl: Option<f64>,
    pub mean_kl: Option<f64>,
    /// Executed over dense-equivalent block-projection MACs (1 without a plan).
    pub mac_ratio: f64,
    pub dense_tokens_per_s: f64,
    pub sparse_tokens_per_s: Option<f64>,
    pub tokens: usize,
}

/// Dense and (optionally) sparse teacher-forced runs over `seqs`.
pub fn evaluate<T: Scalar>(
    model: &ToyTransformer<T>,
    sparsity: Option<&ModelSparsity<T>>,
    seqs: &[Vec<u32>],
    policy: PrefillPolicy,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(Error::invalid("no held-out sequences"));
    }
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    let start = Instant::now();
    let dense = model.forward_batch(seqs, None, None, &mut MacCounter::default())?;
    let dense_tokens_per_s = tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
    let dense_ppl = perplexity(seqs, &dense)?;

    let Some(sp) = sparsity else {
        return Ok(EvalReport {
            dense_ppl,
            sparse_ppl: None,
            mean_kl: None,
            mac_ratio: 1.0,
            dense_tokens_per_s,
            sparse_tokens_per_s: None,
            tokens,
        });
    };
    let select: Vec<Vec<bool>> = seqs.iter().map(|s| policy.positions(s.len())).collect();
    let mut macs = MacCounter::default();
    let start = Instant::now();
    let sparse = model.forward_batch(seqs, Some(sp), Some(&select), &mut macs)?;
    let sparse_tokens_per_s = tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
    Ok(EvalReport {
        dense_ppl,
        sparse_ppl: Some(perplexity(seqs, &sparse)?),
        mean_kl: Some(mean_sequence_kl(&dense, &sparse)?),
        mac_ratio: macs.ratio()?,
        dense_tokens_per_s,
        sparse_tokens_per_s: Some(sparse_tokens_per_s),
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub block: usize,
    pub sparsity: f64,
    pub delta_ppl_pct: f64,
}

/// Sparsifies one block at a time at each level (exponent 0, uniform keep
/// ratio, thresholds calibrated on `calib`) and reports the relative change
/// in held-out perplexity. Blocks before the sparsified one stay dense, so
/// their cached held-out outputs are reused.
pub fn sensitivity_sweep<T: Scalar>(
    model: &ToyTransformer<T>,
    calib: &CalibrationCache<T>,
    heldout: &CalibrationCache<T>,
    levels: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(s) = levels.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::invalid(format!("sweep level {s} outside [0, 1)")));
    }
    let n = model.config().n_blocks;
    let dense_ppl = perplexity(&heldout.sequences, &heldout.dense_logits)?;
    let mut rows = Vec::with_capacity(n * levels.len());
    for b in 0..n {
        let ev = BlockEvaluator::new(model.block(b), model.config(), &calib.blocks[b])?;
        for &level in levels {
            let mut states = ev.states(&[0.0; 7], &[1.0 - level; 7])?;
            ev.run(&mut states)?;
            let mut sp = ModelSparsity::dense(n);
            sp.blocks[b] = Some(states);
            let hidden = run_blocks(
                model,
                heldout.blocks[b].inputs.clone(),
                b..n,
                Some(&sp),
                None,
                None,
                &mut MacCounter::default(),
                |_, _| {},
            )?;
            let logits = hidden.iter().map(|h| model.logits(h)).collect::<Result<Vec<_>>>()?;
            let ppl = perplexity(&heldout.sequences, &logits)?;
            rows.push(SweepRow { block: b, sparsity: level, delta_ppl_pct: 100.0 * (ppl - dense_ppl) / dense_ppl });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub mode: &'static str,
    pub tokens_per_s: f64,
    pub mac_ratio: f64,
    /// Tokens generated per run.
    pub tokens: usize,
    pub output: Vec<u32>,
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of `n_tokens` after `prompt`. Prompt positions follow
/// `policy`; every generated token runs sparsified.
pub fn greedy_decode<T: Scalar>(
    model: &ToyTransformer<T>,
    sparsity: Option<&ModelSparsity<T>>,
    prompt: &[u32],
    n_tokens: usize,
    policy: PrefillPolicy,
    macs: &mut MacCounter,
) -> Result<Vec<u32>> {
    let mut session = DecodeSession::new(model);
    let select = policy.positions(prompt.len());
    let logits = session.feed(prompt, sparsity, Some(&select), macs)?;
    let mut next = argmax(logits.row(logits.rows() - 1));
    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        out.push(next);
        if i + 1 < n_tokens {
            let logits = session.feed(&[next], sparsity, None, macs)?;
            next = argmax(logits.row(0));
        }
    }
    Ok(out)
}

/// Median tokens/s over `runs` greedy decodes, dense then sparse.
pub fn bench_decode<T: Scalar>(
    model: &ToyTransformer<T>,
    sparsity: &ModelSparsity<T>,
    prompt: &[u32],
    n_tokens: usize,
    runs: usize,
    policy: PrefillPolicy,
) -> Result<Vec<BenchResult>> {
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut results = Vec::with_capacity(2);
    for (mode, sp) in [("dense", None), ("sparse", Some(sparsity))] {
        let mut rates = Vec::with_capacity(runs.max(3));
        let mut macs = MacCounter::default();
        let mut output = Vec::new();
        for _ in 0..runs.max(3) {
            macs = MacCounter::default();
            let start = Instant::now();
            output = greedy_decode(model, sp, prompt, n_tokens, policy, &mut macs)?;
            rates.push(n_tokens as f64 / start.elapsed().as_secs_f64().max(1e-9));
        }
        rates.sort_by(f64::total_cmp);
        results.push(BenchResult {
            mode,
            tokens_per_s: rates[rates.len() / 2],
            mac_ratio: macs.ratio()?,
            tokens: output.len(),
            output,
        });
    }
    Ok(results)
}
