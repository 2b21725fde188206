//! File-level commands behind the CLI. Each reads its inputs, runs one job
//! and writes its reports into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::allocate::{BlockAllocation, LayerAllocation};
use crate::calibrate::AlphaSearch;
use crate::data::{capture_block_inputs, ingest_corpus, CalibrationCache, CalibrationSet};
use crate::error::{Error, Result, StageExt};
use crate::fsutil::atomic_write;
use crate::kernels::{bench_matvec, BenchRow};
use crate::model::{init_toy_model, load_model, save_model, tokenizer, LayerKind, ModelConfig, ToyTransformer};
use crate::scoring::ModelSparsity;

use super::eval::{bench_decode, sensitivity_sweep, BenchResult, SweepRow};
use super::report::{num, provenance_line, Csv};
use super::{evaluate, run_ablation, run_pipeline, AblationRow, EvalReport, PipelineConfig, PipelineResult, PrefillPolicy, SparsityPlan};

pub const PLAN_FILE: &str = "plan.toml";

/// Where text comes from and how much of it to use.
#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    pub calib: Vec<PathBuf>,
    pub heldout: Vec<PathBuf>,
    pub calib_sequences: usize,
    pub heldout_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            calib: Vec::new(),
            heldout: Vec::new(),
            calib_sequences: 32,
            heldout_sequences: 16,
            seq_len: 256,
            seed: 0,
        }
    }
}

impl DataOptions {
    pub fn calibration(&self) -> Result<CalibrationSet> {
        if self.calib.is_empty() {
            return Err(Error::invalid("no calibration paths given"));
        }
        ingest_corpus(&self.calib, self.calib_sequences, self.seq_len, self.seed)
    }

    /// Held-out windows, sampled with a seed distinct from calibration.
    pub fn heldout(&self) -> Result<CalibrationSet> {
        if self.heldout.is_empty() {
            return Err(Error::invalid("no held-out paths given"));
        }
        ingest_corpus(&self.heldout, self.heldout_sequences, self.seq_len, self.seed.wrapping_add(1))
    }
}

pub fn load(model_path: &Path) -> Result<ToyTransformer<f32>> {
    load_model(model_path).stage("load model")
}

fn capture(model: &ToyTransformer<f32>, set: &CalibrationSet, stage: &'static str) -> Result<CalibrationCache<f32>> {
    capture_block_inputs(model, set).stage(stage)
}

fn load_plan(path: &Path, model: &ToyTransformer<f32>) -> Result<(SparsityPlan, ModelSparsity<f32>)> {
    let plan = SparsityPlan::load(path).stage("load plan")?;
    let sparsity = plan.to_sparsity(model).stage("load plan")?;
    Ok((plan, sparsity))
}

/// Writes a fresh random toy model.
pub fn cmd_init(model_path: &Path, config: &ModelConfig, seed: u64) -> Result<()> {
    let model = init_toy_model::<f32>(config, seed).stage("init")?;
    save_model(&model, model_path).stage("init")
}

/// Runs the full pipeline and writes the plan, allocation table, exponent
/// table and greedy trace.
pub fn cmd_pipeline(
    model_path: &Path,
    data: &DataOptions,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineResult<f32>> {
    let model = load(model_path)?;
    let calib = data.calibration().stage("calibration data")?;
    let cache = capture(&model, &calib, "calibration capture")?;
    let result = run_pipeline(&model, &calib, &cache, config)?;

    let prov = provenance_line(config.evo.seed, &config.describe());
    result.plan.save(&out_dir.join(PLAN_FILE)).stage("write plan")?;
    allocation_csv(&prov, model.config(), &result.blocks, &result.layers)
        .save(&out_dir.join("allocation.csv"))
        .stage("write reports")?;
    alpha_csv(&prov, &result.alphas).save(&out_dir.join("alpha.csv")).stage("write reports")?;
    atomic_write(&out_dir.join("greedy_trace.log"), greedy_trace(&result.layers).as_bytes()).stage("write reports")?;
    Ok(result)
}

fn mean_over(p: &[f64; 7], weights: &[usize; 7], pick: impl Fn(LayerKind) -> bool) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for k in LayerKind::ALL.into_iter().filter(|&k| pick(k)) {
        num += p[k.index()] * weights[k.index()] as f64;
        den += weights[k.index()] as f64;
    }
    num / den
}

pub fn allocation_csv(prov: &str, cfg: &ModelConfig, _blocks: &BlockAllocation, layers: &[LayerAllocation]) -> Csv {
    let mut header = vec!["block", "attn_sparsity", "mlp_sparsity"];
    header.extend(LayerKind::ALL.iter().map(|k| k.name()));
    let mut csv = Csv::new(prov.to_string(), &header);
    let params = cfg.layer_params();
    for (b, l) in layers.iter().enumerate() {
        let mut row = vec![
            b.to_string(),
            num(mean_over(&l.sparsities, &params, LayerKind::is_attention)),
            num(mean_over(&l.sparsities, &params, |k| !k.is_attention())),
        ];
        row.extend(l.sparsities.iter().map(|&p| num(p)));
        csv.push(row);
    }
    csv
}

pub fn alpha_csv(prov: &str, alphas: &[AlphaSearch<f32>]) -> Csv {
    let mut csv = Csv::new(prov.to_string(), &["block", "layer", "alpha", "block_mse"]);
    for (b, a) in alphas.iter().enumerate() {
        for k in LayerKind::ALL {
            csv.push(vec![b.to_string(), k.name().to_string(), num(a.alphas[k.index()]), num(a.block_mse)]);
        }
    }
    csv
}

/// One line per greedy step, with every trial so the choice can be replayed.
pub fn greedy_trace(layers: &[LayerAllocation]) -> String {
    let mut out = String::new();
    for (b, alloc) in layers.iter().enumerate() {
        for step in &alloc.trace {
            let trials: Vec<String> = step
                .trials
                .iter()
                .map(|(l, inc, err)| format!("{}:{}:{}", LayerKind::ALL[*l].name(), inc, err))
                .collect();
            let _ = writeln!(
                out,
                "block={b} step={} layer={} increment={} error={} trials={}",
                step.step,
                LayerKind::ALL[step.layer].name(),
                step.increment,
                step.error,
                trials.join(";")
            );
        }
    }
    out
}

/// Dense versus planned perplexity, KL and MAC ratio on held-out text.
pub fn cmd_eval(
    model_path: &Path,
    plan_path: Option<&Path>,
    data: &DataOptions,
    policy: PrefillPolicy,
    out_dir: &Path,
) -> Result<EvalReport> {
    let model = load(model_path)?;
    let sparsity = plan_path.map(|p| load_plan(p, &model)).transpose()?.map(|(_, s)| s);
    let heldout = data.heldout().stage("held-out data")?;
    let report = evaluate(&model, sparsity.as_ref(), &heldout.sequences, policy).stage("eval")?;

    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let prov = provenance_line(data.seed, &format!("eval policy={policy} plan={plan_path:?}"));
    let mut csv = Csv::new(
        prov,
        &["dense_ppl", "sparse_ppl", "mean_kl", "mac_ratio", "dense_tokens_per_s", "sparse_tokens_per_s"],
    );
    csv.push(vec![
        num(report.dense_ppl),
        opt(report.sparse_ppl),
        opt(report.mean_kl),
        num(report.mac_ratio),
        num(report.dense_tokens_per_s),
        opt(report.sparse_tokens_per_s),
    ]);
    csv.save(&out_dir.join("eval.csv")).stage("write reports")?;
    Ok(report)
}

/// Per-block perplexity sensitivity at each sparsity level.
pub fn cmd_sweep(model_path: &Path, data: &DataOptions, levels: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    let model = load(model_path)?;
    let calib = data.calibration().stage("calibration data")?;
    let cache = capture(&model, &calib, "calibration capture")?;
    let heldout = data.heldout().stage("held-out data")?;
    let held_cache = capture(&model, &heldout, "held-out capture")?;
    let rows = sensitivity_sweep(&model, &cache, &held_cache, levels).stage("sweep")?;

    let prov = provenance_line(data.seed, &format!("sweep levels={levels:?}"));
    let mut csv = Csv::new(prov, &["block", "sparsity", "delta_ppl_pct"]);
    for r in &rows {
        csv.push(vec![r.block.to_string(), num(r.sparsity), num(r.delta_ppl_pct)]);
    }
    csv.save(&out_dir.join("sweep.csv")).stage("write reports")?;
    Ok(rows)
}

const DEFAULT_PROMPT: &[u8] = b"The quick brown fox jumps over the lazy dog. ";

/// Greedy-decode throughput, dense versus planned.
#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    model_path: &Path,
    plan_path: &Path,
    data: &DataOptions,
    n_tokens: usize,
    prompt_len: usize,
    runs: usize,
    policy: PrefillPolicy,
    out_dir: &Path,
) -> Result<Vec<BenchResult>> {
    let model = load(model_path)?;
    let (_, sparsity) = load_plan(plan_path, &model)?;
    let source = if data.heldout.is_empty() {
        tokenizer::encode(DEFAULT_PROMPT)
    } else {
        data.heldout().stage("held-out data")?.sequences.swap_remove(0)
    };
    let prompt: Vec<u32> = source.iter().copied().cycle().take(prompt_len).collect();
    let results = bench_decode(&model, &sparsity, &prompt, n_tokens, runs, policy).stage("bench")?;

    let prov = provenance_line(data.seed, &format!("bench n={n_tokens} prompt={prompt_len} policy={policy}"));
    let mut csv = Csv::new(prov, &["mode", "tokens_per_s", "mac_ratio", "n_tokens"]);
    for r in &results {
        csv.push(vec![r.mode.to_string(), num(r.tokens_per_s), num(r.mac_ratio), r.tokens.to_string()]);
    }
    csv.save(&out_dir.join("bench.csv")).stage("write reports")?;
    Ok(results)
}

/// The four-row component ablation at the configured target.
pub fn cmd_ablate(
    model_path: &Path,
    data: &DataOptions,
    config: &PipelineConfig,
    policy: PrefillPolicy,
    out_dir: &Path,
) -> Result<Vec<(AblationRow, EvalReport)>> {
    let model = load(model_path)?;
    let calib = data.calibration().stage("calibration data")?;
    let cache = capture(&model, &calib, "calibration capture")?;
    let heldout = data.heldout().stage("held-out data")?;
    let rows = run_ablation(&model, &cache, &heldout.sequences, config, policy)?;

    let prov = provenance_line(config.evo.seed, &format!("ablate {} policy={policy}", config.describe()));
    let mut csv = Csv::new(prov, &["row", "config", "kl", "ppl", "mac_ratio"]);
    for (i, (row, report)) in rows.iter().enumerate() {
        csv.push(vec![
            (i + 1).to_string(),
            row.name().to_string(),
            num(report.mean_kl.unwrap_or(0.0)),
            num(report.sparse_ppl.unwrap_or(report.dense_ppl)),
            num(report.mac_ratio),
        ]);
    }
    csv.save(&out_dir.join("ablate.csv")).stage("write reports")?;
    Ok(rows)
}

/// Matrix-vector kernel timings across sparsity levels.
pub fn cmd_bench_kernel(
    rows: usize,
    cols: usize,
    grid: &[f64],
    iters: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<BenchRow>> {
    let results = bench_matvec(rows, cols, grid, iters, seed).stage("bench kernel")?;
    let prov = provenance_line(seed, &format!("bench-kernel {rows}x{cols} iters={iters} grid={grid:?}"));
    let mut csv = Csv::new(prov, &["sparsity", "ns_per_op", "gmacs_per_s"]);
    for r in &results {
        csv.push(vec![num(r.sparsity), num(r.ns_per_op), num(r.gmacs_per_s)]);
    }
    csv.save(&out_dir.join("bench_kernel.csv")).stage("write reports")?;
    Ok(results)
}
