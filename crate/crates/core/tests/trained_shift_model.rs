//! Properties of a gated autoencoder trained on 1-D cyclic shifts.

use std::sync::OnceLock;

use relate::datagen::{gen_shifted_dots_1d, standardize, Label, PairBatch};
use relate::gae::{self, GaeModel};
use relate::infer::{code_clustering, infer_flow, FlowOptions};
use relate::training::TrainConfig;

const N: usize = 13;
const MAX_SHIFT: usize = 3;

fn model() -> &'static GaeModel {
    static MODEL: OnceLock<GaeModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let (batch, _) = standardize(&gen_shifted_dots_1d(2000, N, 0.3, MAX_SHIFT, true, 1).unwrap());
        let mut model = GaeModel::new(N, N, 5, 26, false, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 100,
            seed: 1,
            ..Default::default()
        };
        gae::train(&mut model, &batch, &cfg, &mut |_| {}).unwrap();
        model
    })
}

/// 100 fresh pairs for every shift in range.
fn pairs_per_shift(seed: u64) -> PairBatch {
    let raw = gen_shifted_dots_1d(100 * (2 * MAX_SHIFT + 1) * 3, N, 0.3, MAX_SHIFT, true, seed).unwrap();
    let labels = raw.labels.as_ref().unwrap();
    let mut picked = Vec::new();
    for s in -(MAX_SHIFT as i64)..=MAX_SHIFT as i64 {
        let idx = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Shift { dx: s, dy: 0 })
            .map(|(a, _)| a)
            .take(100);
        picked.extend(idx);
    }
    assert_eq!(picked.len(), 100 * (2 * MAX_SHIFT + 1));
    standardize(&raw.select(&picked)).0
}

#[test]
fn codes_cluster_by_shift_not_content() {
    let batch = pairs_per_shift(21);
    let c = code_clustering(&model().params, &batch).unwrap();
    assert!(c.gap() >= 0.2, "within {:.3} across {:.3}", c.within, c.across);
}

#[test]
fn flow_on_pure_shifts_is_uniform() {
    let batch = pairs_per_shift(22);
    let mut uniform = 0;
    for a in 0..batch.len() {
        let x = batch.x.column(a).into_owned();
        let y = batch.y.column(a).into_owned();
        let flow = infer_flow(&model().params, &x, &y, batch.x_shape, FlowOptions::default()).unwrap();
        uniform += (flow.uniformity() >= 0.8) as usize;
    }
    let frac = uniform as f64 / batch.len() as f64;
    assert!(frac >= 0.9, "only {:.0}% of flows are uniform", 100.0 * frac);
}
