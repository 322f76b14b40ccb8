use std::collections::BTreeMap;
use std::time::Duration;

use lioncub::collectives::run_local;
use lioncub::optimizer::*;
use lioncub::params::{Layer, ParamSet};
use lioncub::quant::{NormOrder, QuantSpec, ZeroMode};
use lioncub::workloads::{synth_update_vectors, SynthDist};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: Duration = Duration::from_secs(20);
const LR: f64 = 1.0 / 1024.0;

fn one_layer(name: &str, v: Vec<f32>) -> ParamSet {
    ParamSet::new(vec![Layer {
        name: name.into(),
        shape: vec![v.len()],
        values: v,
    }])
}

fn two_layers(a: Vec<f32>, b: Vec<f32>) -> ParamSet {
    let mut p = one_layer("input", a);
    p.layers.extend(one_layer("head", b).layers);
    p
}

fn cfg(codec: UpdateCodec, algo: VoteAlgo, zero_mode: ZeroMode) -> DistLionConfig {
    DistLionConfig {
        hyper: LionHyper::constant(LR, 0.9, 0.99),
        codec,
        algo,
        zero_mode,
        masks: BTreeMap::new(),
    }
}

fn sign_direct() -> DistLionConfig {
    cfg(UpdateCodec::Sign, VoteAlgo::Direct { lane_bits: None }, ZeroMode::Alternating)
}

/// Runs `steps` distributed steps with per-rank gradients and returns each rank's final state and last stats.
fn run(
    cfg: &DistLionConfig,
    init: &ParamSet,
    grads: &[ParamSet],
    steps: usize,
) -> Vec<(WorkerState, StepStats)> {
    run_local(grads.len(), T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(topo.rank() as u64);
        let mut stats = StepStats::default();
        for _ in 0..steps {
            stats = distributed_lion_step(&mut state, &grads[topo.rank()], cfg, topo, &mut rng).unwrap();
        }
        (state, stats)
    })
}

#[test]
fn two_worker_tie_resolves_by_iteration_parity() {
    let init = one_layer("w", vec![0.5]);
    let grads = [one_layer("w", vec![1.0]), one_layer("w", vec![-1.0])];
    let out = run(&sign_direct(), &init, &grads, 1);
    assert_eq!(out[0].1.direction, vec![1]);
    assert_eq!(out[0].1.ties, 1);
    assert_eq!(out[0].0.params.layers[0].values, vec![0.5 - LR as f32]);

    let out = run(&sign_direct(), &init, &grads, 2);
    assert_eq!(out[0].1.direction, vec![-1]);
    assert_eq!(out[0].0.params.layers[0].values, vec![0.5]);
}

#[test]
fn parameters_stay_bit_identical_across_workers() {
    let dims = lioncub::workloads::MlpDims::default();
    let init = lioncub::workloads::init_mlp(&dims, 9);
    let grads: Vec<ParamSet> = (0..5).map(|s| lioncub::workloads::init_mlp(&dims, 100 + s)).collect();
    let spec = QuantSpec::lp(8, NormOrder::Finite(1.0));
    for algo in [
        VoteAlgo::Ps { efficient: false },
        VoteAlgo::Ps { efficient: true },
        VoteAlgo::Direct { lane_bits: None },
    ] {
        let c = cfg(UpdateCodec::Quantized { spec }, algo, ZeroMode::Alternating);
        let out = run(&c, &init, &grads, 20);
        let h = out[0].0.params.bit_hash();
        assert!(out.iter().all(|(s, _)| s.params.bit_hash() == h), "{algo:?}");
        // momentum stays local
        assert_ne!(out[0].0.momentum, out[1].0.momentum);
    }
}

#[test]
fn l1_quantized_vote_tracks_full_precision_sign() {
    let d = 20_000;
    let p = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let grads: Vec<ParamSet> = (0..p)
        .map(|_| one_layer("w", synth_update_vectors(SynthDist::Laplace, d, &mut rng).unwrap()))
        .collect();
    let init = one_layer("w", vec![0.0; d]);
    let spec = QuantSpec::lp(8, NormOrder::Finite(1.0));
    let c = cfg(UpdateCodec::Quantized { spec }, VoteAlgo::Direct { lane_bits: None }, ZeroMode::Alternating);
    let out = run(&c, &init, &grads, 1);
    let dir = &out[0].1.direction;
    let matched = (0..d)
        .filter(|&j| {
            let s: f64 = grads.iter().map(|g| g.layers[0].values[j] as f64).sum();
            (s > 0.0 && dir[j] == 1) || (s < 0.0 && dir[j] == -1)
        })
        .count();
    let rate = matched as f64 / d as f64;
    assert!(rate >= 0.9, "sign match {rate}");
}

#[test]
fn direction_invariant_to_power_of_two_gradient_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grads: Vec<ParamSet> = (0..4)
        .map(|_| one_layer("w", synth_update_vectors(SynthDist::Laplace, 500, &mut rng).unwrap()))
        .collect();
    let scaled: Vec<ParamSet> = grads
        .iter()
        .map(|g| one_layer("w", g.layers[0].values.iter().map(|v| v * 64.0).collect()))
        .collect();
    let init = one_layer("w", vec![0.0; 500]);
    let spec = QuantSpec::lp(8, NormOrder::Finite(1.0));
    let c = cfg(UpdateCodec::Quantized { spec }, VoteAlgo::Ps { efficient: true }, ZeroMode::Alternating);
    let a = run(&c, &init, &grads, 3);
    let b = run(&c, &init, &scaled, 3);
    assert_eq!(a[0].1.direction, b[0].1.direction);
    assert_eq!(a[0].0.params, b[0].0.params);
}

#[test]
fn exact_and_alternating_agree_off_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grads: Vec<ParamSet> = (0..4)
        .map(|_| one_layer("w", synth_update_vectors(SynthDist::Laplace, 1000, &mut rng).unwrap()))
        .collect();
    let init = one_layer("w", vec![0.0; 1000]);
    let algo = VoteAlgo::Ps { efficient: false };
    let exact = run(&cfg(UpdateCodec::Sign, algo, ZeroMode::ExactTernary), &init, &grads, 1);
    let alt = run(&cfg(UpdateCodec::Sign, algo, ZeroMode::Alternating), &init, &grads, 1);
    let (e, a) = (&exact[0].1.direction, &alt[0].1.direction);
    let mut ties = 0;
    for j in 0..1000 {
        if e[j] == 0 {
            ties += 1;
            assert_eq!(a[j], 1, "odd iteration resolves ties upward");
        } else {
            assert_eq!(e[j], a[j]);
        }
    }
    assert_eq!(ties, exact[0].1.ties);
    assert!(ties > 0);
}

#[test]
fn compressed_path_rejects_exact_ternary() {
    let init = one_layer("w", vec![0.0; 3]);
    let grads = [one_layer("w", vec![1.0, 0.0, -1.0]), one_layer("w", vec![1.0, 1.0, 1.0])];
    let c = cfg(UpdateCodec::Sign, VoteAlgo::Compressed1Bit, ZeroMode::ExactTernary);
    let out = run_local(2, T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        distributed_lion_step(&mut state, &grads[topo.rank()], &c, topo, &mut rng).unwrap_err()
    });
    assert!(out.iter().all(|e| e.is_config()));
}

#[test]
fn masked_entries_never_move_or_vote() {
    let init = one_layer("w", vec![0.25, 0.25, 0.25]);
    // every worker pushes entry 1 hard, but it is masked; entry 2 is masked on nobody
    let grads = [one_layer("w", vec![1.0, 5.0, -1.0]), one_layer("w", vec![1.0, 5.0, -1.0])];
    let mut c = sign_direct();
    c.masks.insert("w".into(), vec![false, true, false]);
    let out = run(&c, &init, &grads, 7);
    let v = &out[0].0.params.layers[0].values;
    assert_eq!(v[1], 0.25);
    assert_eq!(v[0], 0.25 - 7.0 * LR as f32);
    assert_eq!(v[2], 0.25 + 7.0 * LR as f32);
    // the masked entry's update contributes zero
    assert_eq!(out[0].1.local_update[1], 0.0);

    c.masks.insert("w".into(), vec![false, true]);
    let bad = run_local(2, T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        distributed_lion_step(&mut state, &grads[topo.rank()], &c, topo, &mut rng).unwrap_err()
    });
    assert!(bad[0].is_config());
}

#[test]
fn identity_codec_single_worker_is_plain_lion() {
    let dims = lioncub::workloads::MlpDims::default();
    let init = lioncub::workloads::init_mlp(&dims, 3);
    let grad = lioncub::workloads::init_mlp(&dims, 4);
    let c = cfg(UpdateCodec::Identity, VoteAlgo::Ps { efficient: false }, ZeroMode::ExactTernary);
    let out = run(&c, &init, std::slice::from_ref(&grad), 5);
    let mut reference = WorkerState::new(init);
    for _ in 0..5 {
        lion_step(&mut reference, &grad, &c.hyper).unwrap();
    }
    assert_eq!(out[0].0, reference);
}

fn signsgd(grads: &[ParamSet], init: &ParamSet, zero_mode: ZeroMode) -> Vec<(WorkerState, StepStats)> {
    let h = LionHyper::constant(LR, 0.9, 0.99);
    run_local(grads.len(), T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let s = signsgd_majority_step(&mut state, &grads[topo.rank()], &h, VoteAlgo::Ps { efficient: false }, zero_mode, topo)
            .unwrap();
        (state, s)
    })
}

#[test]
fn signsgd_majority_examples() {
    let init = one_layer("w", vec![0.5]);
    let grads = [
        one_layer("w", vec![2.0]),
        one_layer("w", vec![-1.0]),
        one_layer("w", vec![-0.5]),
    ];
    let out = signsgd(&grads, &init, ZeroMode::Alternating);
    assert_eq!(out[0].1.direction, vec![-1]);
    for (s, _) in &out {
        assert_eq!(s.params.layers[0].values, vec![0.5 + LR as f32]);
    }

    let out = signsgd(&[one_layer("w", vec![-3.0, 0.0, 4.0])], &one_layer("w", vec![0.0; 3]), ZeroMode::ExactTernary);
    let l = LR as f32;
    assert_eq!(out[0].0.params.layers[0].values, vec![l, 0.0, -l]);
}

fn sync_run(m: [f32; 2], policy: SyncPolicy, iteration: u64) -> Vec<(WorkerState, bool)> {
    let init = two_layers(vec![0.0], vec![0.0]);
    run_local(2, T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let v = m[topo.rank()];
        state.momentum = two_layers(vec![v], vec![v]);
        state.iteration = iteration;
        let fired = maybe_sync_momentum(&mut state, &policy, topo).unwrap();
        (state, fired)
    })
}

#[test]
fn momentum_sync_examples() {
    let all = SyncPolicy {
        period: 1,
        layers: LayerSelector::All,
    };
    for (s, fired) in sync_run([1.0, 3.0], all, 1) {
        assert!(fired);
        assert_eq!(s.momentum, two_layers(vec![2.0], vec![2.0]));
    }

    let head = SyncPolicy {
        period: 10,
        layers: LayerSelector::Named(vec!["head".into()]),
    };
    let out = sync_run([1.0, 3.0], head.clone(), 10);
    assert_eq!(out[1].0.momentum, two_layers(vec![3.0], vec![2.0]));
    let out = sync_run([1.0, 3.0], head, 9);
    assert!(!out[0].1);
    assert_eq!(out[1].0.momentum, two_layers(vec![3.0], vec![3.0]));

    let never = SyncPolicy {
        period: 0,
        layers: LayerSelector::All,
    };
    for t in [0, 1, 10] {
        assert!(!never.fires_at(t));
    }
    assert!(!sync_run([1.0, 3.0], never, 0)[0].1);
}

#[test]
fn divergence_is_population_std() {
    let init = two_layers(vec![0.0, 0.0], vec![0.0]);
    let out = run_local(2, T, |topo| {
        let mut state = WorkerState::new(init.clone());
        let r = topo.rank() as f32;
        state.momentum = two_layers(vec![2.0 * r, 5.0], vec![-4.0 * r]);
        momentum_divergence(&state, topo).unwrap()
    });
    assert_eq!(out[0], vec![("input".to_string(), 1.0), ("head".to_string(), 2.0)]);
    assert_eq!(out[0], out[1]);
}
