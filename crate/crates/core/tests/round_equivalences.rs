use fsdadmm_core::data::{make_synthetic, partition_k_class, sample_shared, SharedMode, SyntheticSpec};
use fsdadmm_core::fsadmm::{
    exchange_outputs, kd_aggregate, local_sgd, shared_distill_loss, shared_outputs, update_multiplier,
    virtual_target, Algorithm, Federation, HyperParams, LocalRule, TargetRule,
};
use fsdadmm_core::graph::Topology;
use fsdadmm_core::linalg::Matrix;
use fsdadmm_core::nnmodel::{ModelSpec, ModelState};
use fsdadmm_core::rng::{self, Stream};

const SEED: u64 = 42;

fn hyper() -> HyperParams {
    HyperParams {
        eta: 2e-2,
        rho_hat: 2e-2,
        nu: 0.01,
        local_batch: 5,
        local_steps: 4,
        kd_batch: 8,
    }
}

fn federation(topology: Topology, hp: HyperParams) -> Federation {
    let n = topology.num_devices();
    let spec = SyntheticSpec {
        num_classes: 4,
        train_per_class: 20,
        test_per_class: 10,
        pool_per_class: 10,
        input_dim: 6,
        separation: 1.5,
        clusters_per_class: 1,
    };
    let data = make_synthetic(&spec, SEED).unwrap();
    let part = partition_k_class(&data.train, n, 1, SEED).unwrap();
    let shared = sample_shared(&data.pool, 16, SharedMode::Iid, SEED).unwrap();
    let init = ModelState::init(ModelSpec::new(6, vec![8], 4).unwrap(), SEED).unwrap();
    Federation::new(topology, data.train, shared, part.into_assignment(), init, hp, SEED).unwrap()
}

fn bits(fed: &Federation) -> Vec<Vec<u64>> {
    fed.devices()
        .iter()
        .map(|d| d.model.params.iter().map(|w| w.to_bits()).collect())
        .collect()
}

/// One function-space round sequenced by hand from the public building blocks.
/// With `multiplier_first` false the target is built from the previous
/// multiplier and the update happens afterwards.
fn reference_round(fed: &mut Federation, round: usize, multiplier_first: bool) {
    let hp = *fed.hyper();
    let topology = fed.topology().clone();
    let train = fed.train().clone();
    let shared = fed.shared().clone();
    let mut outputs = Vec::new();
    for (i, dev) in fed.devices_mut().iter_mut().enumerate() {
        let mut rng = rng::stream(SEED, Stream::LocalSgd, &[i as u64, round as u64]);
        let local = dev.local.clone();
        local_sgd(&mut dev.model, &local, &train, &hp, LocalRule::Plain, &mut dev.velocity, &mut rng).unwrap();
        outputs.push(shared_outputs(&dev.model, &shared).unwrap());
    }
    let (means, _) = exchange_outputs(&topology, &outputs, Default::default());
    for (i, dev) in fed.devices_mut().iter_mut().enumerate() {
        let target = if multiplier_first {
            update_multiplier(&mut dev.multiplier, &outputs[i], &means[i], hp.nu).unwrap();
            virtual_target(&means[i], &dev.multiplier).unwrap()
        } else {
            let z = virtual_target(&means[i], &dev.multiplier).unwrap();
            update_multiplier(&mut dev.multiplier, &outputs[i], &means[i], hp.nu).unwrap();
            z
        };
        kd_aggregate(&mut dev.model, &shared, &target, &hp).unwrap();
    }
}

#[test]
fn round_follows_local_exchange_multiplier_target_order() {
    let topology = Topology::ring(4).unwrap();
    let mut fed = federation(topology.clone(), hyper());
    let mut in_order = fed.clone();
    let mut reordered = fed.clone();
    for t in 0..3 {
        fed.propalg_round().unwrap();
        reference_round(&mut in_order, t, true);
        reference_round(&mut reordered, t, false);
    }
    assert_eq!(bits(&fed), bits(&in_order));
    assert_ne!(bits(&fed), bits(&reordered));
}

#[test]
fn zero_nu_multiplier_is_accumulated_residual() {
    let topology = Topology::ring(5).unwrap();
    let hp = HyperParams { nu: 0.0, ..hyper() };
    let mut fed = federation(topology.clone(), hp);
    let (rows, cols) = (fed.shared().len(), 4);
    let mut sums = vec![Matrix::zeros(rows, cols); 5];
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let trace = fed.propalg_round().unwrap();
        for i in 0..5 {
            let nb = topology.neighbors(i);
            for r in 0..rows {
                for c in 0..cols {
                    let mean = nb.iter().map(|&j| trace.local_outputs[j][(r, c)]).sum::<f64>() / nb.len() as f64;
                    sums[i][(r, c)] += trace.local_outputs[i][(r, c)] - mean;
                }
            }
            worst = worst.max(fed.devices()[i].multiplier.values.max_abs_diff(&sums[i]));
        }
    }
    assert!(worst <= 1e-10, "telescoped residual {worst:e}");
}

#[test]
fn zero_multiplier_variant_is_bit_identical_to_neighbor_mean_distillation() {
    let topology = Topology::ring(4).unwrap();
    let mut zeroed = federation(topology.clone(), hyper());
    let mut cmfd = zeroed.clone();
    for _ in 0..50 {
        let a = zeroed.function_space_round(TargetRule::VirtualTargetZeroMultiplier).unwrap();
        let b = cmfd.cmfd_round().unwrap();
        assert_eq!(a.local_outputs, b.local_outputs);
    }
    assert_eq!(bits(&zeroed), bits(&cmfd));
}

#[test]
fn multiplier_changes_the_trajectory() {
    let mut prop = federation(Topology::ring(4).unwrap(), hyper());
    let mut cmfd = prop.clone();
    for _ in 0..3 {
        prop.propalg_round().unwrap();
        cmfd.cmfd_round().unwrap();
    }
    assert_ne!(bits(&prop), bits(&cmfd));
}

#[test]
fn zero_coefficients_reduce_baselines_to_plain_averaging() {
    let topology = Topology::star(4).unwrap();
    let base = federation(topology, hyper());
    let run = |alg: Algorithm| {
        let mut f = base.clone();
        for _ in 0..5 {
            f.run_round(alg).unwrap();
        }
        bits(&f)
    };
    let avg = run(Algorithm::DecFedAvg { beta: 0.5 });
    assert_eq!(run(Algorithm::DecFedProx { alpha: 0.0, beta: 0.5 }), avg);
    assert_eq!(run(Algorithm::DFedAvgM { beta: 0.5, epsilon: 0.0 }), avg);
}

#[test]
fn zero_beta_is_pure_local_training() {
    let topology = Topology::ring(4).unwrap();
    let mut fed = federation(topology, hyper());
    let mut local = fed.clone();
    let hp = *fed.hyper();
    fed.run_round(Algorithm::DecFedAvg { beta: 0.0 }).unwrap();
    let train = local.train().clone();
    for (i, dev) in local.devices_mut().iter_mut().enumerate() {
        let mut rng = rng::stream(SEED, Stream::LocalSgd, &[i as u64, 0]);
        let idx = dev.local.clone();
        local_sgd(&mut dev.model, &idx, &train, &hp, LocalRule::Plain, &mut dev.velocity, &mut rng).unwrap();
    }
    assert_eq!(bits(&fed), bits(&local));
}

#[test]
fn full_beta_star_hub_takes_leaf_mean() {
    let hp = HyperParams { eta: 0.0, ..hyper() };
    let mut fed = federation(Topology::star(5).unwrap(), hp);
    for (i, dev) in fed.devices_mut().iter_mut().enumerate() {
        dev.model.params.iter_mut().for_each(|w| *w += i as f64);
    }
    let leaves: Vec<Vec<f64>> = fed.devices()[1..].iter().map(|d| d.model.params.clone()).collect();
    fed.run_round(Algorithm::DecFedAvg { beta: 1.0 }).unwrap();
    let hub = &fed.devices()[0].model.params;
    for (k, w) in hub.iter().enumerate() {
        let mean = leaves.iter().map(|p| p[k]).sum::<f64>() / leaves.len() as f64;
        assert!((w - mean).abs() <= 1e-12);
    }
}

#[test]
fn identical_params_without_local_steps_are_a_fixed_point() {
    let hp = HyperParams { eta: 0.0, ..hyper() };
    let mut fed = federation(Topology::ring(4).unwrap(), hp);
    let before = fed.devices()[0].model.params.clone();
    for alg in [
        Algorithm::DecFedAvg { beta: 0.7 },
        Algorithm::DecFedProx { alpha: 0.3, beta: 0.7 },
        Algorithm::DFedAvgM { beta: 0.7, epsilon: 0.9 },
    ] {
        fed.run_round(alg).unwrap();
        for dev in fed.devices() {
            for (w, b) in dev.model.params.iter().zip(&before) {
                assert!((w - b).abs() <= 4.0 * f64::EPSILON * b.abs());
            }
        }
    }
}

#[test]
fn momentum_velocity_follows_heavy_ball_recurrence() {
    let fed = federation(Topology::ring(4).unwrap(), hyper());
    let dev = &fed.devices()[0];
    let mut model = dev.model.clone();
    let hp = HyperParams {
        eta: 0.0,
        local_batch: dev.local.len(),
        local_steps: 2,
        ..hyper()
    };
    let batch: Vec<(&[f64], usize)> = dev.local.iter().map(|&s| (fed.train().input(s), fed.train().label(s))).collect();
    let g = model.grad_local_loss(&batch).unwrap();
    let mut velocity = Vec::new();
    let mut rng = rng::stream(SEED, Stream::LocalSgd, &[0, 0]);
    local_sgd(&mut model, &dev.local, fed.train(), &hp, LocalRule::Momentum { epsilon: 0.9 }, &mut velocity, &mut rng).unwrap();
    for (v, g) in velocity.iter().zip(&g) {
        assert!((v - 1.9 * g).abs() <= 1e-12 * (1.0 + g.abs()));
    }
}

#[test]
fn strong_proximal_pull_keeps_devices_closer_to_neighbor_mean() {
    let hp = HyperParams { eta: 1e-4, local_steps: 10, ..hyper() };
    let base = federation(Topology::ring(4).unwrap(), hp);
    let mut spread = base.clone();
    for (i, dev) in spread.devices_mut().iter_mut().enumerate() {
        dev.model.params.iter_mut().for_each(|w| *w += 0.1 * i as f64);
    }
    let distance = |alpha: f64| {
        let mut f = spread.clone();
        f.run_round(Algorithm::DecFedProx { alpha, beta: 0.0 }).unwrap();
        let t = f.topology().clone();
        (0..4)
            .map(|i| {
                let nb = t.neighbors(i);
                let p = &f.devices()[i].model.params;
                p.iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let m = nb.iter().map(|&j| spread.devices()[j].model.params[k]).sum::<f64>() / nb.len() as f64;
                        (w - m) * (w - m)
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    assert!(distance(1e3) < distance(0.0));
}

#[test]
fn distillation_pass_degenerate_cases() {
    let fed = federation(Topology::ring(4).unwrap(), hyper());
    let model = fed.devices()[0].model.clone();
    let own = shared_outputs(&model, fed.shared()).unwrap();

    let mut frozen = model.clone();
    let hp0 = HyperParams { rho_hat: 0.0, ..hyper() };
    let uniform = Matrix::from_fn(own.rows(), own.cols(), |_, _| 0.25);
    kd_aggregate(&mut frozen, fed.shared(), &uniform, &hp0).unwrap();
    assert_eq!(frozen, model);

    let mut fixed = model.clone();
    kd_aggregate(&mut fixed, fed.shared(), &own, &hyper()).unwrap();
    assert_eq!(fixed, model);

    let target = Matrix::from_fn(own.rows(), own.cols(), |r, c| if c == r % 4 { 1.0 } else { 0.0 });
    let before = shared_distill_loss(&model, fed.shared(), &target).unwrap();
    let mut moved = model.clone();
    kd_aggregate(&mut moved, fed.shared(), &target, &HyperParams { rho_hat: 1e-3, ..hyper() }).unwrap();
    let after = shared_distill_loss(&moved, fed.shared(), &target).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn identical_devices_stay_bit_identical() {
    let hp = hyper();
    let base = federation(Topology::ring(5).unwrap(), hp);
    let everything: Vec<usize> = base.devices()[0].local.clone();
    for alg in [
        Algorithm::PropAlg,
        Algorithm::Cmfd,
        Algorithm::DecFedAvg { beta: 0.5 },
        Algorithm::DecFedProx { alpha: 0.1, beta: 0.5 },
        Algorithm::DFedAvgM { beta: 0.5, epsilon: 0.9 },
    ] {
        let mut fed = base.clone().with_shared_stream(true);
        for dev in fed.devices_mut() {
            dev.local = everything.clone();
        }
        for _ in 0..20 {
            fed.run_round(alg).unwrap();
        }
        let b = bits(&fed);
        assert!(b.iter().all(|d| *d == b[0]), "{} diverged", alg.name());
        let outs = fed.current_outputs().unwrap();
        assert_eq!(fsdadmm_core::metrics::consensus_distance(&outs), 0.0);
    }
}

#[test]
fn measured_bytes_match_closed_form() {
    let topology = Topology::random_connected(6, 8, 3).unwrap();
    let links = 2 * topology.num_edges() as u64;
    let base = federation(topology, hyper());
    let np = base.devices()[0].model.num_params() as u64;
    let out = (base.shared().len() * 4) as u64;
    for (alg, outputs, params) in [
        (Algorithm::PropAlg, 8 * out, 0),
        (Algorithm::Cmfd, 8 * out, 0),
        (Algorithm::DecFedAvg { beta: 0.5 }, 0, 8 * np),
        (Algorithm::DecFedProx { alpha: 0.1, beta: 0.5 }, 0, 2 * 8 * np),
        (Algorithm::DFedAvgM { beta: 0.5, epsilon: 0.5 }, 0, 8 * np),
    ] {
        let mut fed = base.clone();
        for t in 1..=3u64 {
            let trace = fed.run_round(alg).unwrap();
            assert_eq!(trace.bytes.outputs, links * outputs);
            assert_eq!(trace.bytes.params, links * params);
            assert_eq!(fed.cumulative_bytes().total(), t * links * (outputs + params));
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut fed = federation(Topology::ring(6).unwrap(), hyper());
            for _ in 0..5 {
                fed.propalg_round().unwrap();
                fed.run_round(Algorithm::DFedAvgM { beta: 0.5, epsilon: 0.5 }).unwrap();
            }
            bits(&fed)
        })
    };
    assert_eq!(run(1), run(4));
}

