use actsparse::calibrate::{search_alpha_block, AlphaGrid, BlockEvaluator, LayerValues};
use actsparse::data::{capture_block_inputs, CalibrationCache, CalibrationSet};
use actsparse::model::{init_toy_model, LayerKind, ModelConfig, ToyTransformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ModelConfig {
    ModelConfig { n_blocks: 1, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 256, max_seq: 64, rms_eps: 1e-5 }
}

fn calibrate(model: &ToyTransformer<f32>) -> CalibrationCache<f32> {
    let text = "The ferry left at dawn; gulls followed it past the breakwater and out into the grey bay. ".repeat(6);
    capture_block_inputs(model, &CalibrationSet::from_text(&text, 48, 8)).unwrap()
}

/// Only the down projection is sparsified.
fn down_only(keep: f64) -> LayerValues {
    let mut k = [1.0; 7];
    k[LayerKind::Down.index()] = keep;
    k
}

#[test]
fn uniform_column_norms_make_exponent_irrelevant() {
    let mut model = init_toy_model::<f32>(&cfg(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.block_mut(0).map_weights(|kind, w| {
        if kind == LayerKind::Down {
            w.map_inplace(|_| if rng.random_bool(0.5) { 0.2 } else { -0.2 });
        }
    });
    let cache = calibrate(&model);
    let keep = down_only(0.5);
    let block = model.block(0);
    let ev = BlockEvaluator::new(block, model.config(), &cache.blocks[0]).unwrap();
    let mse_at = |alpha: f64| {
        let mut alphas = [0.0; 7];
        alphas[LayerKind::Down.index()] = alpha;
        let mut states = ev.states(&alphas, &keep).unwrap();
        ev.run(&mut states).unwrap().0
    };
    let base = mse_at(0.0);
    assert!(base > 0.0);
    for alpha in [0.5, 1.0] {
        assert!((mse_at(alpha) - base).abs() <= 1e-6 * base.max(1.0), "alpha {alpha}");
    }

    let found = search_alpha_block(block, model.config(), &cache.blocks[0], &keep, &AlphaGrid::default(), 8).unwrap();
    assert_eq!(found.alphas[LayerKind::Down.index()], 0.0);
    let curve = &found.curves[LayerKind::Down.index()];
    assert_eq!(curve.len(), 31);
    assert!(curve.iter().all(|m| (m - curve[0]).abs() <= 1e-6 * curve[0].max(1.0)));
}

#[test]
fn quiet_channel_on_heavy_column_needs_positive_exponent() {
    let mut model = init_toy_model::<f32>(&cfg(), 5).unwrap();
    let c = 7;
    model.block_mut(0).map_weights(|kind, w| match kind {
        // Channel c of the down projection's input is ten times quieter
        // than its neighbours but feeds a column a hundred times heavier.
        LayerKind::Up => {
            let row = w.row_mut(c);
            row.iter_mut().for_each(|v| *v *= 0.1);
        }
        LayerKind::Down => {
            for r in 0..w.rows() {
                let v = w.get(r, c);
                w.set(r, c, v * 100.0);
            }
        }
        _ => {}
    });
    let cache = calibrate(&model);
    let keep = down_only(0.5);
    let block = model.block(0);
    let grid = AlphaGrid::default();
    let found = search_alpha_block(block, model.config(), &cache.blocks[0], &keep, &grid, 8).unwrap();
    let chosen = found.alphas[LayerKind::Down.index()];
    assert!(chosen > 0.0, "exponent stayed at 0");
    assert!(found.block_mse < found.start_mse);

    // Exhaustive grid as its own oracle.
    let ev = BlockEvaluator::new(block, model.config(), &cache.blocks[0]).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for alpha in grid.candidates() {
        let mut alphas = found.alphas;
        alphas[LayerKind::Down.index()] = alpha;
        let mut states = ev.states(&alphas, &keep).unwrap();
        let m = ev.run(&mut states).unwrap().0;
        if m < best.0 {
            best = (m, alpha);
        }
    }
    assert_eq!(best.1, chosen);
    assert!((best.0 - found.block_mse).abs() <= 1e-12 * best.0.max(1.0));
}

#[test]
fn keep_all_short_circuits_to_lowest_exponent() {
    let model = init_toy_model::<f32>(&cfg(), 9).unwrap();
    let cache = calibrate(&model);
    let grid = AlphaGrid::new(0.25, 1.0, 0.25).unwrap();
    let found = search_alpha_block(model.block(0), model.config(), &cache.blocks[0], &[1.0; 7], &grid, 8).unwrap();
    assert_eq!(found.alphas, [0.25; 7]);
    assert_eq!(found.block_mse, 0.0);
    assert!(found.converged);
}

#[test]
fn grid_parses_and_rejects() {
    let g: AlphaGrid = "0:1.5:0.05".parse().unwrap();
    assert_eq!(g, AlphaGrid::default());
    assert_eq!(g.to_string(), "0:1.5:0.05");
    assert_eq!(g.candidates().last().copied(), Some(1.5));
    for bad in ["", "1:0:0.1", "0:1:0", "0:1", "a:b:c", "-1:1:0.5"] {
        assert!(bad.parse::<AlphaGrid>().is_err(), "{bad}");
    }
}
