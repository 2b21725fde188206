use actsparse::allocate::{
    block_level_allocation, evaluate_allocation, greedy_allocate, intra_block_allocation, EvoParams, StepEvaluator,
};
use actsparse::data::{capture_block_inputs, CalibrationSet};
use actsparse::model::{init_toy_model, ModelConfig};
use actsparse::numerics::Matrix;
use actsparse::scoring::{build_mask, compute_scores, SparsityState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `y = W2 s(W1 s(x))`, each layer masked by magnitude with a threshold
/// calibrated on the inputs that layer sees.
struct TwoLayer {
    x: Vec<Vec<f32>>,
    w: [Matrix<f32>; 2],
    dense: Vec<Vec<f32>>,
}

fn matvec(w: &Matrix<f32>, x: &[f32]) -> Vec<f32> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

impl TwoLayer {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, scale: f32| {
            let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
            Matrix::from_vec(rows, cols, data).unwrap()
        };
        let w = [mat(16, 16, 0.5), mat(16, 16, 0.5)];
        let x = (0..40).map(|_| (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let mut net = TwoLayer { x, w, dense: Vec::new() };
        net.dense = net.run(&[0.0, 0.0]);
        net
    }

    fn masked(&self, layer: usize, inputs: &[Vec<f32>], p: f64) -> Vec<Vec<f32>> {
        let ones = vec![1.0f32; self.w[layer].cols()];
        let pool: Vec<f32> = inputs.iter().flatten().map(|v| v.abs()).collect();
        let mut state = SparsityState::new(&ones, 0.0, 1.0 - p).unwrap();
        state.calibrate(&pool).unwrap();
        inputs
            .iter()
            .map(|x| {
                let mask = build_mask(&compute_scores(x, &state).unwrap(), state.threshold());
                matvec(&self.w[layer], &mask.apply(x).unwrap())
            })
            .collect()
    }

    fn run(&self, p: &[f64]) -> Vec<Vec<f32>> {
        let h = self.masked(0, &self.x, p[0]);
        self.masked(1, &h, p[1])
    }

    fn error(&self, p: &[f64]) -> f64 {
        let out = self.run(p);
        let (mut se, mut n) = (0.0, 0);
        for (a, b) in out.iter().flatten().zip(self.dense.iter().flatten()) {
            se += (*a as f64 - *b as f64).powi(2);
            n += 1;
        }
        se / n as f64
    }
}

impl StepEvaluator for TwoLayer {
    fn trial(&mut self, _layer: usize, p: &[f64]) -> actsparse::Result<f64> {
        Ok(self.error(p))
    }

    fn commit(&mut self, _layer: usize) {}
}

#[test]
fn greedy_close_to_exhaustive_two_layer_optimum() {
    let (budget, delta) = (0.2, 0.05);
    for seed in 0..8 {
        let mut net = TwoLayer::new(seed);
        let (p, trace) = greedy_allocate(&[1.0, 1.0], budget, delta, &mut net).unwrap();
        let greedy = net.error(&p);

        // Equal layer sizes: the budget takes exactly 2 * budget / delta
        // single-layer steps, so every reachable end point is (k, n - k).
        let n = (2.0 * budget / delta).round() as usize;
        assert_eq!(trace.len(), n);
        let best = (0..=n)
            .map(|k| net.error(&[k as f64 * delta, (n - k) as f64 * delta]))
            .fold(f64::INFINITY, f64::min);
        assert!(greedy <= 1.1 * best, "seed {seed}: greedy {greedy} vs optimum {best}");

        // Each recorded choice was that step's argmin.
        for step in &trace {
            let min = step.trials.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
            assert_eq!(step.error, min);
            assert_eq!(step.trials.iter().find(|t| t.2 == min).unwrap().0, step.layer);
        }
    }
}

#[test]
fn single_layer_takes_whole_budget_in_ceil_steps() {
    let mut net = TwoLayer::new(7);
    let (p, trace) = greedy_allocate(&[1.0, 0.0], 0.33, 0.05, &mut net).unwrap();
    assert_eq!(trace.len(), (0.33f64 / 0.05).ceil() as usize);
    assert!((p[0] - 0.33).abs() < 1e-12);
    assert_eq!(p[1], 0.0);
}

#[test]
fn greedy_rejects_unreachable_budget_and_bad_step() {
    let mut net = TwoLayer::new(1);
    assert!(greedy_allocate(&[1.0, 1.0], 1.2, 0.05, &mut net).is_err());
    assert!(greedy_allocate(&[1.0, 1.0], 0.5, 0.0, &mut net).is_err());
    let (p, trace) = greedy_allocate(&[1.0, 1.0], 0.0, 0.05, &mut net).unwrap();
    assert_eq!(p, vec![0.0, 0.0]);
    assert!(trace.is_empty());
}

fn tiny() -> ModelConfig {
    ModelConfig { n_blocks: 3, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 256, max_seq: 64, rms_eps: 1e-5 }
}

fn calib() -> CalibrationSet {
    let text = "Lanterns swung over the market stalls while the rain eased into a fine drizzle. ".repeat(5);
    CalibrationSet::from_text(&text, 40, 6)
}

#[test]
fn real_block_greedy_lands_on_budget() {
    let model = init_toy_model::<f32>(&tiny(), 2).unwrap();
    let cache = capture_block_inputs(&model, &calib()).unwrap();
    let cfg = model.config();
    let params = cfg.layer_params();
    for budget in [0.0, 0.3, 0.5, 0.9] {
        let alloc = intra_block_allocation(model.block(1), cfg, budget, 0.05, &cache.blocks[1]).unwrap();
        let eff: f64 = alloc.sparsities.iter().zip(params).map(|(p, w)| p * w as f64).sum::<f64>()
            / params.iter().sum::<usize>() as f64;
        assert!((eff - budget).abs() < 1e-9, "budget {budget}: effective {eff}");
        assert!(alloc.sparsities.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn evolution_holds_constraint_and_never_regresses() {
    let model = init_toy_model::<f32>(&tiny(), 4).unwrap();
    let cache = capture_block_inputs(&model, &calib()).unwrap();
    let params = EvoParams { generations: 6, offspring: 6, ..EvoParams::desk() };
    let a = block_level_allocation(&model, &cache, 0.4, &params).unwrap();
    assert!(a.candidate_averages.iter().all(|v| (v - 0.4).abs() <= params.step / 2.0));
    assert!(a.incumbent_losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(a.loss <= a.uniform_loss);
    assert_eq!(evaluate_allocation(&a.sparsities, &model, &cache).unwrap(), a.loss);
    assert!(block_level_allocation(&model, &cache, 1.0, &params).is_err());
}
