use proptest::prelude::*;
use stc_core::numerics::Matrix;
use stc_core::pruner::{
    establish_anchors, prefill_cost_model, HistoryBuffer, PrunerConfig, PrunerState,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f32..10.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn frames() -> impl Strategy<Value = Vec<Matrix>> {
    (1usize..40, 1usize..12, 1usize..8)
        .prop_flat_map(|(n, d, len)| prop::collection::vec(matrix(n, d), len))
}

proptest! {
    #[test]
    fn retained_count_and_order(frames in frames(), ratio in 0.0f64..1.0, alpha in 0.0f64..=1.0, window in 1usize..6) {
        let mut state = PrunerState::new(PrunerConfig { prune_ratio: ratio, alpha, window }).unwrap();
        for f in &frames {
            let r = state.process_frame(f).unwrap();
            let k = (f.rows() as f64 * (1.0 - ratio) + 1e-9).floor() as usize;
            prop_assert_eq!(r.retained_indices.len(), k);
            prop_assert!(r.retained_indices.as_slice().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(r.scores.iter().all(|s| (-1e-12..=2.0 + 1e-12).contains(s)));
        }
        prop_assert_eq!(state.history().len(), frames.len().min(window));
    }

    #[test]
    fn kept_tokens_score_at_least_dropped(frames in frames(), ratio in 0.0f64..1.0) {
        let mut state = PrunerState::new(PrunerConfig { prune_ratio: ratio, ..PrunerConfig::default() }).unwrap();
        for f in &frames {
            let r = state.process_frame(f).unwrap();
            let kept_min = r.retained_indices.iter().map(|&i| r.scores[i]).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..f.rows())
                .filter(|&i| !r.retained_indices.contains(i))
                .map(|i| r.scores[i])
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn anchors_have_token_dimension(f in matrix(5, 7)) {
        let (t, s) = establish_anchors(&HistoryBuffer::new(4), &f).unwrap();
        prop_assert_eq!(&t, &s);
        prop_assert_eq!(s.len(), 7);
    }
}

#[test]
fn pruning_nothing_keeps_everything() {
    let f = Matrix::from_fn(10, 3, |r, c| (r * 3 + c) as f32);
    let mut state = PrunerState::new(PrunerConfig {
        prune_ratio: 0.0,
        ..PrunerConfig::default()
    })
    .unwrap();
    let r = state.process_frame(&f).unwrap();
    assert_eq!(r.retained_tokens, f);
}

#[test]
fn prefill_cost_is_quadratic() {
    assert_eq!(prefill_cost_model(16) / prefill_cost_model(64), 0.0625);
}

#[test]
fn mismatched_history_dimension_is_rejected() {
    let mut state = PrunerState::new(PrunerConfig::default()).unwrap();
    state.process_frame(&Matrix::zeros(4, 3)).unwrap();
    assert!(state.process_frame(&Matrix::zeros(4, 5)).is_err());
}
