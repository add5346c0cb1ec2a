//! Training-protocol tests on the synthetic shape task.

use std::cell::RefCell;

use qutelab::baselines::{train_single_exit, BasePredictor};
use qutelab::data::{synth_dataset, Dataset};
use qutelab::ensemble::Predictor;
use qutelab::graph::presets::{after_layer, base_spec, cnn4, Cnn4Config};
use qutelab::graph::{build_graph, transfer_layer, ExitKind, Mode, NetworkGraph};
use qutelab::monitor::{detect_events, predict_batch, IdStats, Outcomes};
use qutelab::qute::{attach_qute_heads, strip_for_inference, train_qute, train_qute_with, LossWeights, QutePredictor};
use qutelab::tensor::{ParamStore, Rng};
use qutelab::train::{init_rng, TrainConfig, TrainEvent};

fn synth_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        initial_lr: 0.003,
        augment: false,
        seed,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> (Dataset, Dataset) {
    synth_dataset(n, 10, 21).unwrap().split(0.1, 0)
}

fn qute_graph(seed: u64) -> NetworkGraph {
    let trunk = cnn4(&Cnn4Config::synth());
    let locs = [after_layer(&trunk, 1).unwrap(), after_layer(&trunk, 2).unwrap()];
    attach_qute_heads(&trunk, [1, 16, 16], 10, 2, &locs, &mut init_rng(seed)).unwrap()
}

fn transfer_pairs(g: &NetworkGraph) -> Vec<(String, String)> {
    g.exits_of(ExitKind::EarlyExit)
        .map(|ee| {
            let ev = g.exit(ee.partner.as_deref().unwrap()).unwrap();
            (transfer_layer(ee).unwrap().name.clone(), transfer_layer(ev).unwrap().name.clone())
        })
        .collect()
}

fn same_params(a: &ParamStore, b: &ParamStore, names: &[String]) -> bool {
    names
        .iter()
        .all(|n| a.by_name(n).unwrap().value.data() == b.by_name(n).unwrap().value.data())
}

#[test]
fn base_learns_synth_shapes_in_three_epochs() {
    let (train, valid) = data(4000);
    let test = synth_dataset(500, 10, 77).unwrap();
    let trunk = cnn4(&Cnn4Config::synth());
    let mut g = build_graph(base_spec(&trunk, [1, 16, 16], 10), &mut init_rng(0)).unwrap();
    train_single_exit(&mut g, &train, &valid, &synth_cfg(3, 0)).unwrap();
    let acc = predict_batch(&BasePredictor { graph: g }, &test, 256).unwrap().accuracy();
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn qute_without_exits_is_base_training() {
    let (train, valid) = data(600);
    let trunk = cnn4(&Cnn4Config::synth());
    let spec = base_spec(&trunk, [1, 16, 16], 10);
    let cfg = synth_cfg(2, 5);
    let mut base = build_graph(spec.clone(), &mut init_rng(5)).unwrap();
    let base_log = train_single_exit(&mut base, &train, &valid, &cfg).unwrap();
    let mut qute = build_graph(spec, &mut init_rng(5)).unwrap();
    let qute_log = train_qute(&mut qute, &train, &valid, &cfg, &LossWeights::new(vec![], 3.0, 0.5)).unwrap();
    for ((na, a), (nb, b)) in base.params().iter().zip(qute.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.value.data(), b.value.data(), "{na}");
    }
    assert_eq!(base_log, qute_log);
}

#[test]
fn transfer_holds_at_every_batch_start_and_trunk_freezes() {
    let (train, valid) = data(640);
    let cfg = synth_cfg(10, 3);
    let mut g = qute_graph(3);
    let pairs = transfer_pairs(&g);
    let trunk_names: Vec<String> = g.trunk_param_ids().iter().map(|&id| g.params().name(id).to_string()).collect();
    let freeze_at = cfg.freeze_epoch();
    assert_eq!(freeze_at, 9);
    let batches = RefCell::new(0usize);
    let mismatches = RefCell::new(0usize);
    let frozen_snapshot: RefCell<Option<ParamStore>> = RefCell::new(None);
    let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
    train_qute_with(&mut g, &train, &valid, &cfg, &weights, true, &mut |ev, g| {
        if let TrainEvent::BatchStart { epoch, batch } = ev {
            *batches.borrow_mut() += 1;
            for (ee, evn) in &pairs {
                let (ew, eb) = g.block_params(ee).unwrap();
                let (vw, vb) = g.block_params(evn).unwrap();
                let p = g.params();
                if p.get(ew).value.data() != p.get(vw).value.data() || p.get(eb).value.data() != p.get(vb).value.data() {
                    *mismatches.borrow_mut() += 1;
                }
            }
            if epoch == freeze_at && batch == 0 {
                *frozen_snapshot.borrow_mut() = Some(g.params().clone());
            }
        }
    })
    .unwrap();
    assert_eq!(*batches.borrow(), 10 * train.len().div_ceil(32));
    assert_eq!(*mismatches.borrow(), 0);
    let snap = frozen_snapshot.into_inner().expect("reached the freeze epoch");
    assert!(same_params(&snap, g.params(), &trunk_names), "trunk moved while frozen");
    // Heads keep training through the frozen epochs.
    let ev_dense = g.params().name(g.block_params("ev1/dense").unwrap().0).to_string();
    assert!(!same_params(&snap, g.params(), &[ev_dense]));
}

#[test]
fn without_transfer_partners_drift_apart() {
    let (train, valid) = data(320);
    let mut g = qute_graph(4);
    let pairs = transfer_pairs(&g);
    let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
    train_qute_with(&mut g, &train, &valid, &synth_cfg(1, 4), &weights, false, &mut |_, _| {}).unwrap();
    let (ew, _) = g.block_params(&pairs[0].0).unwrap();
    let (vw, _) = g.block_params(&pairs[0].1).unwrap();
    assert_ne!(g.params().get(ew).value.data(), g.params().get(vw).value.data());
}

#[test]
fn losses_converge_with_transfer() {
    let (train, valid) = data(2000);
    let mut g = qute_graph(6);
    let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
    let log = train_qute(&mut g, &train, &valid, &synth_cfg(5, 6), &weights).unwrap();
    let first = log.record(0, "final", "train").unwrap().loss;
    let fifth = log.record(4, "final", "train").unwrap().loss;
    assert!(fifth <= 0.5 * first, "final exit loss {first} -> {fifth}");

    // Early-view batch losses stay finite and end well below where they start.
    let per_epoch = log.batches_per_epoch;
    for ev in ["ev1", "ev2"] {
        let losses = &log.batch_losses[ev];
        assert!(losses.iter().all(|l| l.is_finite()));
        let head: f64 = losses[..per_epoch].iter().sum::<f64>() / per_epoch as f64;
        let tail: f64 = losses[losses.len() - per_epoch..].iter().sum::<f64>() / per_epoch as f64;
        assert!(tail < head, "{ev}: first-epoch mean {head}, last-epoch mean {tail}");
    }
}

#[test]
fn stripped_graph_reproduces_ev_logits_after_training() {
    let (train, valid) = data(320);
    let mut g = qute_graph(8);
    let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
    train_qute(&mut g, &train, &valid, &synth_cfg(1, 8), &weights).unwrap();
    let x = valid.all_tensor();
    let full = g.predict_logits(&x, 64, Mode::Eval, &mut Rng::new(0, 0)).unwrap();
    let stripped = strip_for_inference(&g).unwrap();
    let small = stripped.predict_logits(&x, 17, Mode::Eval, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(small.len(), 2);
    for (name, l) in &small {
        assert_eq!(l.data(), full[name].data(), "{name}");
    }
    assert!(stripped.param_count(false) < g.param_count(false));
}

#[test]
fn ablating_exits_leaves_others_unchanged() {
    let g = qute_graph(9);
    let x = synth_dataset(20, 10, 1).unwrap().all_tensor();
    let all = g.forward_all_exits(&x, Mode::Eval, &mut Rng::new(0, 0)).unwrap();
    for drop in ["ee1", "ev2", "final"] {
        let some = g.forward_exits(&x, Mode::Eval, &mut Rng::new(0, 0), |e| e.name != drop).unwrap();
        assert!(!some.logits.contains_key(drop));
        for (name, l) in &some.logits {
            assert_eq!(l.data(), all.logits[name].data(), "{name} changed when {drop} was removed");
        }
    }
}

#[test]
fn same_seed_trains_identically() {
    let (train, valid) = data(320);
    let run = || {
        let mut g = qute_graph(2);
        let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
        let log = train_qute(
            &mut g,
            &train,
            &valid,
            &TrainConfig {
                augment: true,
                ..synth_cfg(2, 2)
            },
            &weights,
        )
        .unwrap();
        (g, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
}

#[test]
fn detection_counts_ignore_prediction_chunking() {
    let (train, valid) = data(640);
    let mut g = qute_graph(12);
    let weights = LossWeights::for_graph(&g, 3.0, 0.5).unwrap();
    train_qute(&mut g, &train, &valid, &synth_cfg(1, 12), &weights).unwrap();
    let p = QutePredictor::new(&g).unwrap();
    let stream = synth_dataset(300, 10, 31).unwrap();
    let stats = IdStats {
        mu_id: 0.7,
        sigma_id: 0.02,
        m: 20,
    };
    let counts: Vec<_> = [1usize, 7, 64, 300]
        .iter()
        .map(|&chunk| {
            let o = Outcomes::from_batch(&predict_batch(&p as &dyn Predictor, &stream, chunk).unwrap());
            (0..=10).map(|r| detect_events(&o, r as f64 / 10.0, &stats).unwrap()).collect::<Vec<_>>()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}
