use approx::assert_abs_diff_eq;
use flnn::bcd::{run_full, train_batched, TrainOptions};
use flnn::checkpoint;
use flnn::data::{batches, decode_idx, encode_idx, Dataset, Split, CLASSES};
use flnn::divergence::{matrix_divergence, relu_divergence, sigmoid_divergence};
use flnn::network::{lifted_objective, standard_objective};
use flnn::{ActivationKind, Hyperparams, LiftedState, LossKind, NetworkSpec, Weights};
use ndarray::{array, Array2};

// Reference values computed with mpmath at 30 digits.
const SIGMOID_CASES: [(f64, f64, f64); 5] = [
    (0.5, 1.0, 0.120_114_506_958_277_52),
    (0.0, 0.0, std::f64::consts::LN_2),
    (0.2, -1.0, 0.012_859_263_980_034_950),
    (0.9, 3.0, 0.023_504_378_182_293_801),
    (1.0, -2.0, 2.126_928_011_042_972_5),
];

#[test]
fn sigmoid_divergence_matches_high_precision_values() {
    for (v, u, want) in SIGMOID_CASES {
        assert_abs_diff_eq!(sigmoid_divergence(v, u), want, epsilon = 1e-14);
    }
}

#[test]
fn relu_divergence_by_hand() {
    // v²/2 + max(u,0)²/2 − uv
    assert_eq!(relu_divergence(1.0, 2.0), 0.5);
    assert_eq!(relu_divergence(2.0, -1.0), 4.0);
    assert_eq!(relu_divergence(3.0, 3.0), 0.0);
    assert_eq!(relu_divergence(0.0, -5.0), 0.0);
    let v = array![[1.0, 2.0], [0.0, 3.0]];
    let u = array![[2.0, -1.0], [-5.0, 3.0]];
    assert_eq!(matrix_divergence(ActivationKind::Relu, v.view(), u.view()).unwrap(), 4.5);
}

fn toy(m: usize) -> Dataset {
    let classes: Vec<usize> = (0..m).map(|j| j % CLASSES).collect();
    let inputs = Array2::from_shape_fn((6, m), |(i, j)| ((i * 5 + classes[j] * 3 + j % 4) % 9) as f64 / 8.0);
    Dataset::new(inputs, classes, CLASSES, Split::Train).unwrap()
}

#[test]
fn full_training_never_increases_the_lifted_objective() {
    let spec = NetworkSpec::uniform(vec![6, 5, 4, 10], ActivationKind::Relu, LossKind::Mse).unwrap();
    let data = toy(60);
    let mut h = Hyperparams::non_batched(&spec);
    h.lambda = 2.0;
    h.outer_max_iters = 8;
    let opts = TrainOptions { track_blocks: true, ..TrainOptions::default() };
    let (w, s, report) = run_full(&spec, &data, &h, &opts).unwrap();
    assert!(!report.records.is_empty());
    let slack = 10.0 * h.inner_tol;
    for rec in &report.records {
        for d in &rec.deltas {
            assert!(d.after <= d.before + slack, "{} rose from {} to {}", d.block, d.before, d.after);
        }
    }
    let lifted: Vec<f64> = report.records.iter().map(|r| r.lifted).collect();
    assert!(lifted.windows(2).all(|p| p[1] <= p[0] + slack), "{lifted:?}");
    assert_abs_diff_eq!(lifted_objective(&spec, &w, &s, &h, None).unwrap(), *lifted.last().unwrap(), epsilon = 1e-9);
}

#[test]
fn feed_forward_state_has_equal_objectives() {
    let spec = NetworkSpec::uniform(vec![6, 5, 4, 10], ActivationKind::Relu, LossKind::CrossEntropy).unwrap();
    let data = toy(30);
    let w = Weights::init(&spec, 5);
    let h = Hyperparams::non_batched(&spec);
    let s = LiftedState::feed_forward(&spec, &w, data.inputs.clone(), data.labels.clone()).unwrap();
    let lifted = lifted_objective(&spec, &w, &s, &h, None).unwrap();
    let standard = standard_objective(&spec, &w, data.inputs.view(), data.labels.view(), &h.rho).unwrap();
    assert!((lifted - standard).abs() <= 1e-10 * standard.abs());
}

#[test]
fn batched_training_is_seed_deterministic() {
    let spec = NetworkSpec::uniform(vec![6, 5, 10], ActivationKind::Relu, LossKind::CrossEntropy).unwrap();
    let data = toy(40);
    let mut h = Hyperparams::batched(&spec);
    h.batch_size = 10;
    h.epochs = 2;
    h.w_steps = Some(3);
    let (w1, r1) = train_batched(&spec, &data, &h, &TrainOptions::default()).unwrap();
    let (w2, r2) = train_batched(&spec, &data, &h, &TrainOptions::default()).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(r1.records.len(), 8);
    let strip = |r: &flnn::bcd::TrainReport| r.records.iter().map(|x| (x.lifted, x.standard, x.train_acc)).collect::<Vec<_>>();
    assert_eq!(strip(&r1), strip(&r2));
    assert_eq!(batches(40, 10, 0, 1), batches(40, 10, 0, 1));
    assert_ne!(batches(40, 10, 0, 0), batches(40, 10, 0, 1));
}

#[test]
fn checkpoint_and_idx_round_trips() {
    let spec = NetworkSpec::new(
        vec![6, 5, 4, 10],
        vec![ActivationKind::Relu, ActivationKind::Sigmoid],
        LossKind::CrossEntropy,
    )
    .unwrap();
    let w = Weights::init(&spec, 11);
    let (spec2, w2) = checkpoint::decode(&checkpoint::encode(&spec, &w).unwrap()).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(w2, w);

    let mut data = toy(25);
    data.inputs.mapv_inplace(|x| (x * 255.0).round() / 255.0);
    data.rows = 2;
    data.cols = 3;
    let (img, lab) = encode_idx(&data).unwrap();
    assert_eq!(decode_idx(&img, &lab, Split::Train).unwrap(), data);
}
