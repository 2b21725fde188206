use actsparse::kernels::{dense_matvec, sparse_matvec, ChannelMask, MacCounter, PackedWeight};
use actsparse::numerics::Matrix;
use actsparse::scoring::{apply_sparse_projection, build_mask, compute_scores, SparsityState};
use proptest::prelude::*;

fn shape_and_data() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>, Vec<bool>)> {
    (1usize..=48, 1usize..=48).prop_flat_map(|(rows, cols)| {
        (
            Just(rows),
            Just(cols),
            prop::collection::vec(-3.0f32..3.0, rows * cols),
            prop::collection::vec(-3.0f32..3.0, cols),
            prop::collection::vec(any::<bool>(), cols),
        )
    })
}

proptest! {
    #[test]
    fn packed_keep_all_is_bitwise_dense((rows, cols, w, x, _) in shape_and_data()) {
        let m = Matrix::from_vec(rows, cols, w).unwrap();
        let packed = PackedWeight::from_matrix(&m);
        let mut macs = MacCounter::default();
        let dense = packed.matvec(&x, &mut macs).unwrap();
        let sparse = packed.sparse_matvec(&x, &ChannelMask::all(cols), &mut macs).unwrap();
        prop_assert_eq!(dense, sparse);
        prop_assert_eq!(macs.executed_macs, macs.dense_macs);
    }

    #[test]
    fn sparse_equals_dense_on_zeroed_input((rows, cols, w, x, bits) in shape_and_data()) {
        let m = Matrix::from_vec(rows, cols, w).unwrap();
        let mask = ChannelMask::from_bits(bits);
        let zeroed = mask.apply(&x).unwrap();
        let mut macs = MacCounter::default();
        let expect = dense_matvec(&zeroed, &m, &mut MacCounter::default()).unwrap();
        let a = sparse_matvec(&x, &m, &mask, &mut macs).unwrap();
        let b = PackedWeight::from_matrix(&m).sparse_matvec(&x, &mask, &mut macs).unwrap();
        for ((e, a), b) in expect.iter().zip(&a).zip(&b) {
            prop_assert!((e - a).abs() <= 1e-5 && (e - b).abs() <= 1e-5);
        }
        prop_assert_eq!(macs.executed_macs, 2 * (rows * mask.kept_count()) as u64);
    }

    #[test]
    fn projection_uses_the_score_mask(
        (rows, cols, w, x, _) in shape_and_data(),
        alpha in 0.0f64..1.5,
        keep in 0.0f64..=1.0,
    ) {
        let m = Matrix::from_vec(rows, cols, w).unwrap();
        let packed = PackedWeight::from_matrix(&m);
        let norms = actsparse::numerics::column_l2_norms(&m);
        let mut state = SparsityState::new(&norms, alpha, keep).unwrap();
        state.calibrate(&compute_scores(&x, &state).unwrap()).unwrap();
        let mask = build_mask(&compute_scores(&x, &state).unwrap(), state.threshold());
        let mut macs = MacCounter::default();
        let got = apply_sparse_projection(&x, &packed, &state, &mut macs).unwrap();
        let want = packed.sparse_matvec(&x, &mask, &mut MacCounter::default()).unwrap();
        prop_assert_eq!(got, want);
        // Calibrated on this very token, so at least round(keep * cols) survive.
        prop_assert!(mask.kept_count() >= (keep * cols as f64).round() as usize);
    }
}
