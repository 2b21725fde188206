use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::MacCounter;
use crate::numerics::{Matrix, Scalar};
use crate::scoring::{push_scores, select_channels, validate_block_states, ModelSparsity, SparsityState};

use super::{Block, LayerKind, Linear, ModelConfig, ToyTransformer};

/// Groups of a block's forward pass. Each stage depends only on the
/// outputs of earlier stages, so a search that changes one projection can
/// restart from that projection's stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// q/k/v projections and causal attention.
    Attention,
    /// o projection, residual add and the MLP pre-norm.
    Output,
    /// gate/up projections and the SwiGLU product.
    Mlp,
    /// down projection and residual add.
    Down,
}

/// Intermediate activations of one block over a batch of sequences.
#[derive(Clone, Debug)]
pub struct BlockActivations<T> {
    pub input: Vec<Matrix<T>>,
    pub normed: Vec<Matrix<T>>,
    pub attn: Vec<Matrix<T>>,
    pub hidden: Vec<Matrix<T>>,
    pub hidden_normed: Vec<Matrix<T>>,
    pub act: Vec<Matrix<T>>,
    pub output: Vec<Matrix<T>>,
}

impl<T: Scalar> BlockActivations<T> {
    pub fn new(block: &Block<T>, cfg: &ModelConfig, input: Vec<Matrix<T>>) -> Self {
        let normed = input.iter().map(|x| rms_norm(x, &block.attn_norm, cfg.rms_eps)).collect();
        BlockActivations {
            input,
            normed,
            attn: Vec::new(),
            hidden: Vec::new(),
            hidden_normed: Vec::new(),
            act: Vec::new(),
            output: Vec::new(),
        }
    }

    /// Input of a projection site.
    pub fn layer_input(&self, kind: LayerKind) -> &[Matrix<T>] {
        match kind.stage() {
            Stage::Attention => &self.normed,
            Stage::Output => &self.attn,
            Stage::Mlp => &self.hidden_normed,
            Stage::Down => &self.act,
        }
    }
}

/// Keys and values of one sequence for one block.
#[derive(Clone, Debug, Default)]
pub struct KvCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// How projections treat their inputs.
pub(crate) enum ProjMode<'a, T> {
    Dense,
    /// Calibrated states; `select[seq][row]` picks the rows that are sparsified.
    Fixed { states: &'a [SparsityState<T>], select: Option<&'a [Vec<bool>]> },
    /// Recalibrates each state's threshold on the batch it is about to see.
    Calibrate { states: &'a mut [SparsityState<T>] },
}

pub(crate) fn rms_norm<T: Scalar>(x: &Matrix<T>, weight: &[T], eps: f64) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v.to_acc() * v.to_acc()).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, w) in row.iter_mut().zip(weight) {
            *v = T::from_acc(v.to_acc() * inv * w.to_acc());
        }
    }
    out
}

fn project<T: Scalar>(
    lin: &Linear<T>,
    kind: LayerKind,
    inputs: &[Matrix<T>],
    mode: &mut ProjMode<'_, T>,
    macs: &mut MacCounter,
) -> Result<Vec<Matrix<T>>> {
    let (state, select) = match mode {
        ProjMode::Dense => (None, None),
        ProjMode::Fixed { states, select } => (Some(&states[kind.index()]), *select),
        ProjMode::Calibrate { states } => {
            let state = &mut states[kind.index()];
            let total: usize = inputs.iter().map(|x| x.rows() * x.cols()).sum();
            if state.keep_ratio() >= 1.0 {
                state.set_threshold(T::neg_infinity(), total);
            } else {
                let mut pool = Vec::with_capacity(total);
                for x in inputs {
                    for r in 0..x.rows() {
                        push_scores(x.row(r), state, &mut pool);
                    }
                }
                state.calibrate(&pool)?;
            }
            (Some(&states[kind.index()]), None)
        }
    };

    let w = lin.packed();
    let mut acc = vec![0.0f64; w.rows()];
    let mut kept = Vec::with_capacity(w.cols());
    let mut outputs = Vec::with_capacity(inputs.len());
    for (s, x) in inputs.iter().enumerate() {
        let mut y = Matrix::zeros(x.rows(), w.rows());
        for r in 0..x.rows() {
            let sparsify = select.map_or(true, |sel| sel[s][r]);
            match state {
                Some(st) if sparsify => {
                    select_channels(x.row(r), st, &mut kept);
                    w.gather_matvec_into(x.row(r), &kept, &mut acc, y.row_mut(r), macs)?;
                }
                _ => w.matvec_into(x.row(r), &mut acc, y.row_mut(r), macs)?,
            }
        }
        outputs.push(y);
    }
    Ok(outputs)
}

/// Causal multi-head attention of `q` against `k`/`v`, optionally appending
/// to and reading from a cache holding earlier positions.
fn attend<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cache: Option<&mut KvCache<T>>,
    n_heads: usize,
) -> Matrix<T> {
    match cache {
        Some(c) => {
            let offset = c.len;
            c.keys.extend_from_slice(k.data());
            c.values.extend_from_slice(v.data());
            c.len += q.rows();
            attend_over(q, &c.keys, &c.values, offset, n_heads)
        }
        None => attend_over(q, k.data(), v.data(), 0, n_heads),
    }
}

fn attend_over<T: Scalar>(q: &Matrix<T>, keys: &[T], values: &[T], offset: usize, n_heads: usize) -> Matrix<T> {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = q.rows();

    let mut out = Matrix::zeros(n, d);
    let mut scores = Vec::with_capacity(offset + n);
    let mut acc = vec![0.0f64; hd];
    for t in 0..n {
        let visible = offset + t + 1;
        for h in 0..n_heads {
            let heads = h * hd..(h + 1) * hd;
            let qh = &q.row(t)[heads.clone()];
            scores.clear();
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                let s = qh.iter().zip(kh).map(|(a, b)| a.to_acc() * b.to_acc()).sum::<f64>() * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut total = 0.0;
            for s in &mut scores {
                *s = (*s - max).exp();
                total += *s;
            }
            acc.fill(0.0);
            for (j, p) in scores.iter().enumerate() {
                let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
                for (a, &x) in acc.iter_mut().zip(vh) {
                    *a += p * x.to_acc();
                }
            }
            for (o, a) in out.row_mut(t)[heads].iter_mut().zip(&acc) {
                *o = T::from_acc(a / total);
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    out
}

/// Runs a block from `from` onwards, overwriting the activations of that
/// stage and every later one. Earlier stages in `acts` must be current.
pub(crate) fn run_block<T: Scalar>(
    block: &Block<T>,
    cfg: &ModelConfig,
    acts: &mut BlockActivations<T>,
    from: Stage,
    mode: &mut ProjMode<'_, T>,
    mut caches: Option<&mut [KvCache<T>]>,
    macs: &mut MacCounter,
) -> Result<()> {
    if from <= Stage::Attention {
        let q = project(block.layer(LayerKind::Q), LayerKind::Q, &acts.normed, mode, macs)?;
        let k = project(block.layer(LayerKind::K), LayerKind::K, &acts.normed, mode, macs)?;
        let v = project(block.layer(LayerKind::V), LayerKind::V, &acts.normed, mode, macs)?;
        acts.attn = (0..q.len())
            .map(|s| {
                let cache = caches.as_deref_mut().map(|c| &mut c[s]);
                attend(&q[s], &k[s], &v[s], cache, cfg.n_heads)
            })
            .collect();
    }
    if from <= Stage::Output {
        let o = project(block.layer(LayerKind::O), LayerKind::O, &acts.attn, mode, macs)?;
        acts.hidden = acts.input.iter().zip(&o).map(|(x, o)| add(x, o)).collect();
        acts.hidden_normed = acts.hidden.iter().map(|h| rms_norm(h, &block.mlp_norm, cfg.rms_eps)).collect();
    }
    if from <= Stage::Mlp {
        let g = project(block.layer(LayerKind::Gate), LayerKind::Gate, &acts.hidden_normed, mode, macs)?;
        let u = project(block.layer(LayerKind::Up), LayerKind::Up, &acts.hidden_normed, mode, macs)?;
        acts.act = g
            .into_iter()
            .zip(&u)
            .map(|(mut g, u)| {
                for (a, &b) in g.data_mut().iter_mut().zip(u.data()) {
                    *a = T::from_acc(silu(a.to_acc()) * b.to_acc());
                }
                g
            })
            .collect();
    }
    let d = project(block.layer(LayerKind::Down), LayerKind::Down, &acts.act, mode, macs)?;
    acts.output = acts.hidden.iter().zip(&d).map(|(h, d)| add(h, d)).collect();
    Ok(())
}

/// One block over one sequence, dense or with calibrated states.
pub fn block_forward<T: Scalar>(
    block: &Block<T>,
    cfg: &ModelConfig,
    x: &Matrix<T>,
    states: Option<&[SparsityState<T>]>,
) -> Result<Matrix<T>> {
    if x.cols() != cfg.d_model {
        return Err(Error::shape(format!("block input width {} != d_model {}", x.cols(), cfg.d_model)));
    }
    let mut mode = match states {
        Some(states) => {
            validate_block_states(0, states, &cfg.input_widths())?;
            ProjMode::Fixed { states, select: None }
        }
        None => ProjMode::Dense,
    };
    let mut acts = BlockActivations::new(block, cfg, vec![x.clone()]);
    run_block(block, cfg, &mut acts, Stage::Attention, &mut mode, None, &mut MacCounter::default())?;
    Ok(acts.output.pop().expect("one sequence in, one out"))
}

/// Runs `blocks` of the model over a batch, calling `observe` with each
/// block's activations. Returns the hidden states after the last block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_blocks<T: Scalar>(
    model: &ToyTransformer<T>,
    xs: Vec<Matrix<T>>,
    blocks: Range<usize>,
    sparsity: Option<&ModelSparsity<T>>,
    select: Option<&[Vec<bool>]>,
    mut caches: Option<&mut [Vec<KvCache<T>>]>,
    macs: &mut MacCounter,
    mut observe: impl FnMut(usize, &BlockActivations<T>),
) -> Result<Vec<Matrix<T>>> {
    let cfg = &model.config;
    if let Some(sp) = sparsity {
        if sp.blocks.len() != cfg.n_blocks {
            return Err(Error::invalid(format!(
                "sparsity covers {} blocks, model has {}",
                sp.blocks.len(),
                cfg.n_blocks
            )));
        }
    }
    let widths = cfg.input_widths();
    let mut xs = xs;
    for b in blocks {
        let block = &model.blocks[b];
        let mut mode = match sparsity.and_then(|sp| sp.block(b)) {
            Some(states) => {
                validate_block_states(b, states, &widths)?;
                ProjMode::Fixed { states, select }
            }
            None => ProjMode::Dense,
        };
        let cache = caches.as_deref_mut().map(|c| c[b].as_mut_slice());
        let mut acts = BlockActivations::new(block, cfg, xs);
        run_block(block, cfg, &mut acts, Stage::Attention, &mut mode, cache, macs)?;
        observe(b, &acts);
        xs = std::mem::take(&mut acts.output);
    }
    Ok(xs)
}

impl<T: Scalar> ToyTransformer<T> {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(self.embed.row(t as usize));
        }
        Matrix::from_vec(tokens.len(), d, data)
    }

    /// Final norm and vocabulary projection.
    pub fn logits(&self, hidden: &Matrix<T>) -> Result<Matrix<T>> {
        let normed = rms_norm(hidden, &self.final_norm, self.config.rms_eps);
        let w = self.lm_head.packed();
        let mut acc = vec![0.0f64; w.rows()];
        let mut out = Matrix::zeros(hidden.rows(), w.rows());
        let mut macs = MacCounter::default();
        for r in 0..hidden.rows() {
            w.matvec_into(normed.row(r), &mut acc, out.row_mut(r), &mut macs)?;
        }
        Ok(out)
    }

    /// Full forward over a batch of sequences. Returns logits per sequence;
    /// `macs` accumulates block-projection MACs only.
    pub fn forward_batch(
        &self,
        seqs: &[Vec<u32>],
        sparsity: Option<&ModelSparsity<T>>,
        select: Option<&[Vec<bool>]>,
        macs: &mut MacCounter,
    ) -> Result<Vec<Matrix<T>>> {
        let xs = seqs
            .iter()
            .map(|s| {
                self.check_tokens(s)?;
                self.embed_tokens(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = run_blocks(self, xs, 0..self.config.n_blocks, sparsity, select, None, macs, |_, _| {})?;
        hidden.iter().map(|h| self.logits(h)).collect()
    }
}

/// Per-block inputs and outputs of one sequence plus its logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub block_inputs: Vec<Matrix<T>>,
    pub block_outputs: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
    pub macs: MacCounter,
}

pub fn model_forward<T: Scalar>(
    model: &ToyTransformer<T>,
    tokens: &[u32],
    sparsity: Option<&ModelSparsity<T>>,
) -> Result<ForwardTrace<T>> {
    model.check_tokens(tokens)?;
    let x = model.embed_tokens(tokens)?;
    let mut macs = MacCounter::default();
    let mut inputs = Vec::with_capacity(model.config.n_blocks);
    let mut outputs = Vec::with_capacity(model.config.n_blocks);
    let hidden = run_blocks(model, vec![x], 0..model.config.n_blocks, sparsity, None, None, &mut macs, |_, acts| {
        inputs.push(acts.input[0].clone());
        outputs.push(acts.output[0].clone());
    })?;
    let logits = model.logits(&hidden[0])?;
    Ok(ForwardTrace { block_inputs: inputs, block_outputs: outputs, logits, macs })
}

/// Incremental decoding with per-block KV caches for one sequence.
pub struct DecodeSession<'a, T> {
    model: &'a ToyTransformer<T>,
    caches: Vec<Vec<KvCache<T>>>,
    pos: usize,
}

impl<'a, T: Scalar> DecodeSession<'a, T> {
    pub fn new(model: &'a ToyTransformer<T>) -> Self {
        DecodeSession { model, caches: vec![vec![KvCache::default()]; model.config.n_blocks], pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds `tokens` and returns their logits. `select[i]` chooses whether
    /// token `i` runs sparsified (all do when `None`).
    pub fn feed(
        &mut self,
        tokens: &[u32],
        sparsity: Option<&ModelSparsity<T>>,
        select: Option<&[bool]>,
        macs: &mut MacCounter,
    ) -> Result<Matrix<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let end = self.pos + tokens.len();
        if end > self.model.config.max_seq {
            return Err(Error::SequenceTooLong { len: end, max: self.model.config.max_seq });
        }
        if let Some(sel) = select {
            crate::error::ensure_len(tokens.len(), sel.len())?;
        }
        let x = self.model.embed_tokens(tokens)?;
        let select = select.map(|s| vec![s.to_vec()]);
        let hidden = run_blocks(
            self.model,
            vec![x],
            0..self.model.config.n_blocks,
            sparsity,
            select.as_deref(),
            Some(&mut self.caches),
            macs,
            |_, _| {},
        )?;
        self.pos = end;
        self.model.logits(&hidden[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::dense_matvec;
    use crate::model::init_toy_model;

    fn cfg() -> ModelConfig {
        ModelConfig { n_blocks: 2, d_model: 16, n_heads: 4, d_ff: 24, vocab_size: 256, max_seq: 24, rms_eps: 1e-5 }
    }

    fn model() -> ToyTransformer<f64> {
        init_toy_model(&cfg(), 17).unwrap()
    }

    fn tokens() -> Vec<u32> {
        crate::model::tokenizer::encode_str("sparse forward")
    }

    fn states_with(block: &Block<f64>, keep: f64, threshold: f64) -> Vec<SparsityState<f64>> {
        LayerKind::ALL
            .iter()
            .map(|&k| SparsityState::with_threshold(block.layer(k).col_norms(), 0.5, keep, threshold, 1).unwrap())
            .collect()
    }

    fn close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn keep_all_matches_dense() {
        let m = model();
        let sp = ModelSparsity { blocks: m.blocks().iter().map(|b| Some(states_with(b, 1.0, f64::NEG_INFINITY))).collect() };
        let dense = model_forward(&m, &tokens(), None).unwrap();
        let sparse = model_forward(&m, &tokens(), Some(&sp)).unwrap();
        assert_eq!(dense.logits, sparse.logits);
        assert_eq!(sparse.macs.dense_macs, sparse.macs.executed_macs);
    }

    #[test]
    fn keep_nothing_passes_residual_through() {
        let m = model();
        let states = states_with(m.block(0), 0.0, f64::INFINITY);
        let x = m.embed_tokens(&tokens()).unwrap();
        let y = block_forward(m.block(0), m.config(), &x, Some(&states)).unwrap();
        assert_eq!(x, y);
    }

    /// Reference block written with plain masked dense products.
    fn oracle_block(block: &Block<f64>, cfg: &ModelConfig, x: &Matrix<f64>, states: &[SparsityState<f64>]) -> Matrix<f64> {
        let proj = |kind: LayerKind, input: &Matrix<f64>| {
            let st = &states[kind.index()];
            let w = block.layer(kind).weight();
            let rows: Vec<Vec<f64>> = (0..input.rows())
                .map(|r| {
                    let masked: Vec<f64> = input
                        .row(r)
                        .iter()
                        .zip(st.col_norm_pow())
                        .map(|(&v, &p)| if v.abs() * p >= st.threshold() { v } else { 0.0 })
                        .collect();
                    dense_matvec(&masked, w, &mut MacCounter::default()).unwrap()
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let n = x.rows();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let normed = rms_norm(x, block.attn_norm(), cfg.rms_eps);
        let (q, k, v) = (proj(LayerKind::Q, &normed), proj(LayerKind::K, &normed), proj(LayerKind::V, &normed));
        let mut attn = Matrix::zeros(n, d);
        for h in 0..cfg.n_heads {
            for t in 0..n {
                let s: Vec<f64> = (0..=t)
                    .map(|j| (0..hd).map(|c| q.get(t, h * hd + c) * k.get(j, h * hd + c)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    attn.set(t, h * hd + c, (0..=t).map(|j| e[j] / z * v.get(j, h * hd + c)).sum());
                }
            }
        }
        let hidden = add(x, &proj(LayerKind::O, &attn));
        let hn = rms_norm(&hidden, block.mlp_norm(), cfg.rms_eps);
        let (g, u) = (proj(LayerKind::Gate, &hn), proj(LayerKind::Up, &hn));
        let mut act = g.clone();
        for (a, &b) in act.data_mut().iter_mut().zip(u.data()) {
            *a = *a / (1.0 + (-*a).exp()) * b;
        }
        add(&hidden, &proj(LayerKind::Down, &act))
    }

    #[test]
    fn sparse_block_matches_masked_dense_oracle() {
        let m = model();
        let states = states_with(m.block(1), 0.5, 0.3);
        let x = m.embed_tokens(&tokens()).unwrap();
        let y = block_forward(m.block(1), m.config(), &x, Some(&states)).unwrap();
        let expect = oracle_block(m.block(1), m.config(), &x, &states);
        assert!(close(&y, &expect, 1e-9));
        let dense = block_forward(m.block(1), m.config(), &x, None).unwrap();
        assert!(!close(&y, &dense, 1e-6));
    }

    #[test]
    fn batch_matches_individual_sequences() {
        let m = model();
        let seqs = vec![tokens(), crate::model::tokenizer::encode_str("another one"), vec![7]];
        let batch = m.forward_batch(&seqs, None, None, &mut MacCounter::default()).unwrap();
        for (s, logits) in seqs.iter().zip(&batch) {
            assert_eq!(&model_forward(&m, s, None).unwrap().logits, logits);
        }
    }

    #[test]
    fn decode_matches_full_forward() {
        let m = model();
        let sp = ModelSparsity { blocks: m.blocks().iter().map(|b| Some(states_with(b, 0.5, 0.2))).collect() };
        let toks = tokens();
        let full = model_forward(&m, &toks, Some(&sp)).unwrap().logits;
        let mut session = DecodeSession::new(&m);
        let mut macs = MacCounter::default();
        let prefill = session.feed(&toks[..5], Some(&sp), None, &mut macs).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..5).map(|r| prefill.row(r).to_vec()).collect();
        for &t in &toks[5..] {
            rows.push(session.feed(&[t], Some(&sp), None, &mut macs).unwrap().row(0).to_vec());
        }
        assert_eq!(session.position(), toks.len());
        assert!(close(&Matrix::from_rows(&rows).unwrap(), &full, 1e-9));
    }

    #[test]
    fn prefill_selection_controls_sparsification() {
        let m = model();
        let sp = ModelSparsity { blocks: m.blocks().iter().map(|b| Some(states_with(b, 0.5, 0.2))).collect() };
        let toks = tokens();
        let mut dense_macs = MacCounter::default();
        let mut s = DecodeSession::new(&m);
        let all_dense = s.feed(&toks, Some(&sp), Some(&vec![false; toks.len()]), &mut dense_macs).unwrap();
        assert_eq!(all_dense, model_forward(&m, &toks, None).unwrap().logits);
        assert_eq!(dense_macs.executed_macs, dense_macs.dense_macs);
        let mut s = DecodeSession::new(&m);
        assert!(s.feed(&toks, Some(&sp), Some(&[true]), &mut MacCounter::default()).is_err());
    }

    #[test]
    fn input_errors() {
        let m = model();
        assert!(matches!(model_forward(&m, &[], None), Err(Error::EmptySequence)));
        assert!(matches!(model_forward(&m, &[1; 25], None), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(model_forward(&m, &[300], None), Err(Error::TokenOutOfRange { token: 300, .. })));
        let mut states = states_with(m.block(0), 0.5, 0.2);
        states.pop();
        let sp = ModelSparsity { blocks: vec![Some(states), None] };
        match model_forward(&m, &tokens(), Some(&sp)) {
            Err(Error::MissingLayerState { block: 0, layer }) => assert_eq!(layer, "down_proj"),
            other => panic!("{other:?}"),
        }
        let mut s = DecodeSession::new(&m);
        s.feed(&[1; 20], None, None, &mut MacCounter::default()).unwrap();
        assert!(s.feed(&[1; 5], None, None, &mut MacCounter::default()).is_err());
    }
}
