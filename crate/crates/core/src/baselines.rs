//! Reference methods: the unmodified network, deep ensembles, MC dropout,
//! early-exit ensembles and temperature scaling.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::ensemble::{from_member_logits, EnsemblePrediction, Predictor, EVAL_CHUNK};
use crate::graph::presets::{base_spec, dropout_spec, ee_ensemble_spec, FINAL_EXIT};
use crate::graph::{build_graph, load_checkpoint, save_checkpoint, BlockSpec, ExitKind, GraphSpec, LayerKind, Mode, NetworkGraph};
use crate::qute::{depth_ratios, exit_ensemble_predict, mean_tensor, member_logits};
use crate::tensor::{ops, Rng, Tensor};
use crate::train::{init_rng, train_graph, Objective, TrainConfig, TrainEvent, TrainLog};
use crate::{Error, Result};

/// Default hidden width of early-exit ensemble heads.
pub const DEFAULT_EE_HIDDEN: usize = 64;
/// Dropout rate for MNIST-scale MC dropout.
pub const DEFAULT_MCD_RATE: f32 = 0.1;

fn single_exit_objective() -> Objective {
    Objective {
        weights: IndexMap::from([(FINAL_EXIT.to_string(), 1.0)]),
        transfer: false,
        freeze: false,
    }
}

fn no_transfer(_: &mut NetworkGraph) -> Result<()> {
    Ok(())
}

/// Train `graph` on its final exit only.
pub fn train_single_exit(graph: &mut NetworkGraph, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_graph(graph, train, valid, cfg, &single_exit_objective(), &no_transfer, &mut |_, _| {})
}

/// Build the plain network from `init_rng(cfg.seed)` and train it.
pub fn train_base(
    trunk: &[BlockSpec],
    input: [usize; 3],
    classes: usize,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<(NetworkGraph, TrainLog)> {
    cfg.validate()?;
    let mut g = build_graph(base_spec(trunk, input, classes), &mut init_rng(cfg.seed))?;
    let log = train_single_exit(&mut g, train, valid, cfg)?;
    Ok((g, log))
}

/// Final-exit softmax of a single network.
#[derive(Debug, Clone)]
pub struct BasePredictor {
    pub graph: NetworkGraph,
}

impl Predictor for BasePredictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        exit_ensemble_predict(&self.graph, images, |k| k == ExitKind::Final)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(mean_tensor(&member_logits(&self.graph, images, |k| k == ExitKind::Final)?)))
    }
}

/// Independently initialised copies of one architecture.
#[derive(Debug, Clone)]
pub struct EnsembleOfGraphs {
    pub members: Vec<NetworkGraph>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub seeds: Vec<u64>,
    pub architecture_hash: String,
    pub members: Vec<String>,
}

/// SHA-256 of the architecture's JSON form, hex encoded.
pub fn architecture_hash(spec: &GraphSpec) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(spec)?)))
}

pub const ENSEMBLE_MANIFEST: &str = "manifest.json";

impl EnsembleOfGraphs {
    pub fn new(members: Vec<NetworkGraph>, seeds: Vec<u64>) -> Result<Self> {
        check_seeds(&seeds)?;
        if members.len() != seeds.len() {
            return Err(Error::InvalidArgument(format!("{} members but {} seeds", members.len(), seeds.len())));
        }
        let first = members.first().ok_or_else(|| Error::InvalidArgument("ensemble has no members".into()))?;
        if members.iter().any(|m| m.spec() != first.spec()) {
            return Err(Error::Graph("ensemble members differ in architecture".into()));
        }
        Ok(Self { members, seeds })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One checkpoint per member plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}.qte");
            save_checkpoint(m, dir.join(&name))?;
            names.push(name);
        }
        let manifest = EnsembleManifest {
            seeds: self.seeds.clone(),
            architecture_hash: architecture_hash(self.members[0].spec())?,
            members: names,
        };
        fs::write(dir.join(ENSEMBLE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(ENSEMBLE_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let manifest: EnsembleManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let members = manifest
            .members
            .iter()
            .map(|n| load_checkpoint(dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        for m in &members {
            let h = architecture_hash(m.spec())?;
            if h != manifest.architecture_hash {
                return Err(Error::Format(format!("member architecture hash {h} does not match manifest")));
            }
        }
        Self::new(members, manifest.seeds)
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a deep ensemble needs at least 2 members, got {}",
            seeds.len()
        )));
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(Error::InvalidArgument(format!("duplicate ensemble seed {s}")));
        }
    }
    Ok(())
}

/// Train one plain network per seed. Members share nothing, so `parallel`
/// only changes wall-clock time.
#[allow(clippy::too_many_arguments)]
pub fn train_deep(
    trunk: &[BlockSpec],
    input: [usize; 3],
    classes: usize,
    seeds: &[u64],
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<EnsembleOfGraphs> {
    check_seeds(seeds)?;
    let member = |seed: u64| {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        train_base(trunk, input, classes, train, valid, &cfg).map(|(g, _)| g)
    };
    let members: Vec<NetworkGraph> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || member(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("member training panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        seeds.iter().map(|&s| member(s)).collect::<Result<_>>()?
    };
    EnsembleOfGraphs::new(members, seeds.to_vec())
}

fn final_logits(graph: &NetworkGraph, images: &Tensor) -> Result<Tensor> {
    Ok(member_logits(graph, images, |k| k == ExitKind::Final)?.remove(0))
}

/// Mean of the members' final-exit softmaxes.
pub fn deep_predict(ens: &EnsembleOfGraphs, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
    let logits = ens.members.iter().map(|m| final_logits(m, images)).collect::<Result<Vec<_>>>()?;
    from_member_logits(&logits.iter().collect::<Vec<_>>())
}

impl Predictor for EnsembleOfGraphs {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        deep_predict(self, images)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        let logits = self.members.iter().map(|m| final_logits(m, images)).collect::<Result<Vec<_>>>()?;
        Ok(Some(mean_tensor(&logits)))
    }
}

/// Plain network with dropout after each of `locations`.
pub fn build_mcd(trunk: &[BlockSpec], input: [usize; 3], classes: usize, locations: &[String], rate: f32, rng: &mut Rng) -> Result<NetworkGraph> {
    check_rate(rate)?;
    build_graph(dropout_spec(trunk, input, classes, locations, rate)?, rng)
}

fn check_rate(rate: f32) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside (0, 1)")));
    }
    Ok(())
}

const MCD_STREAM: u64 = 0x3cd << 32;

fn mcd_pass_logits(graph: &NetworkGraph, images: &Tensor, passes: usize, seed: u64) -> Result<Vec<Tensor>> {
    let rates: Vec<f32> = graph
        .spec()
        .trunk
        .iter()
        .filter_map(|b| match b.kind {
            LayerKind::Dropout { rate } => Some(rate),
            _ => None,
        })
        .collect();
    if rates.is_empty() {
        return Err(Error::Graph("MC dropout needs dropout layers in the trunk".into()));
    }
    for &r in &rates {
        check_rate(r)?;
    }
    if passes == 0 {
        return Err(Error::InvalidArgument("MC dropout needs at least one pass".into()));
    }
    (0..passes as u64)
        .map(|p| {
            let mut rng = Rng::new(seed, MCD_STREAM | p);
            let mut logits = graph.predict_logits(images, EVAL_CHUNK, Mode::EvalWithDropout, &mut rng)?;
            logits
                .shift_remove(FINAL_EXIT)
                .ok_or_else(|| Error::Graph("MC dropout graph has no final exit".into()))
        })
        .collect()
}

/// Mean softmax over `passes` forward passes with dropout active.
pub fn mcd_predict(graph: &NetworkGraph, images: &Tensor, passes: usize, seed: u64) -> Result<Vec<EnsemblePrediction>> {
    let logits = mcd_pass_logits(graph, images, passes, seed)?;
    from_member_logits(&logits.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone)]
pub struct McdPredictor {
    pub graph: NetworkGraph,
    pub passes: usize,
    pub seed: u64,
}

impl Predictor for McdPredictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        mcd_predict(&self.graph, images, self.passes, self.seed)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(mean_tensor(&mcd_pass_logits(&self.graph, images, self.passes, self.seed)?)))
    }
}

/// Trunk with an auxiliary classifier after each location plus the final exit.
pub fn build_ee_ensemble(
    trunk: &[BlockSpec],
    input: [usize; 3],
    classes: usize,
    locations: &[String],
    hidden: usize,
    rng: &mut Rng,
) -> Result<NetworkGraph> {
    build_graph(ee_ensemble_spec(trunk, input, classes, locations, hidden)?, rng)
}

/// Auxiliary exits weighted by relative depth, final exit by 1, no transfer.
pub fn train_ee_ensemble(graph: &mut NetworkGraph, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut weights = IndexMap::new();
    let aux: Vec<String> = graph.exits_of(ExitKind::Auxiliary).map(|e| e.name.clone()).collect();
    for (name, tau) in aux.into_iter().zip(depth_ratios(graph, ExitKind::Auxiliary)?) {
        weights.insert(name, tau as f32);
    }
    weights.insert(FINAL_EXIT.to_string(), 1.0);
    let objective = Objective {
        weights,
        transfer: false,
        freeze: false,
    };
    train_graph(
        graph,
        train,
        valid,
        cfg,
        &objective,
        &no_transfer,
        &mut |_: TrainEvent, _: &NetworkGraph| {},
    )
}

fn ee_member(kind: ExitKind) -> bool {
    matches!(kind, ExitKind::Auxiliary | ExitKind::Final)
}

/// Mean softmax over the auxiliary exits and the final exit.
pub fn ee_predict(graph: &NetworkGraph, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
    exit_ensemble_predict(graph, images, ee_member)
}

#[derive(Debug, Clone)]
pub struct EePredictor {
    pub graph: NetworkGraph,
}

impl Predictor for EePredictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        ee_predict(&self.graph, images)
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(mean_tensor(&member_logits(&self.graph, images, ee_member)?)))
    }
}

/// Positive logit divisor. `1` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOL: f64 = 1e-4;

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {t} must be positive")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean categorical NLL of `softmax(logits / t)` in 64-bit.
pub fn scaled_nll(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / t));
        let lse = max + row.iter().map(|&v| (v as f64 / t - max).exp()).sum::<f64>().ln();
        let logp = (row[y] as f64 / t - lse).max(ops::PROB_FLOOR.ln());
        total -= logp;
    }
    total / labels.len() as f64
}

/// Temperature minimising validation NLL, by golden-section search.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<Temperature> {
    if labels.is_empty() || logits.batch() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {} labels",
            logits.batch(),
            labels.len()
        )));
    }
    let classes = logits.row_len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Degenerate("temperature fit needs at least two classes in the held-out set".into()));
    }
    let f = |t: f64| scaled_nll(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Temperature::new((a + b) / 2.0)
}

/// `softmax(logits / t)` per row, in 64-bit.
pub fn apply_temperature(logits: &Tensor, t: Temperature) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|i| {
            let z: Vec<f64> = logits.row(i).iter().map(|&v| v as f64 / t.0).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Pool-then-calibrate: average member logits, then divide by `t`.
#[derive(Debug, Clone)]
pub struct TemperatureScaled<P> {
    pub inner: P,
    pub t: Temperature,
}

impl<P: Predictor> TemperatureScaled<P> {
    /// Fit on held-out data through the inner predictor's pooled logits.
    pub fn fit(inner: P, valid: &Dataset) -> Result<Self> {
        let logits = pooled(&inner, &valid.all_tensor())?;
        let t = fit_temperature(&logits, valid.labels())?;
        Ok(Self { inner, t })
    }
}

fn pooled(p: &impl Predictor, images: &Tensor) -> Result<Tensor> {
    p.pooled_logits(images)?
        .ok_or_else(|| Error::InvalidArgument("predictor has no logit-space output to calibrate".into()))
}

impl<P: Predictor> Predictor for TemperatureScaled<P> {
    fn predict(&self, images: &Tensor) -> Result<Vec<EnsemblePrediction>> {
        apply_temperature(&pooled(&self.inner, images)?, self.t)
            .into_iter()
            .map(|row| EnsemblePrediction::from_members(vec![row]))
            .collect()
    }

    fn pooled_logits(&self, images: &Tensor) -> Result<Option<Tensor>> {
        self.inner.pooled_logits(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn synth(n: usize, classes: usize, seed: u64) -> Dataset {
        synth_dataset(n, classes, seed).unwrap()
    }
    use crate::graph::presets::{after_layer, cnn4, Cnn4Config};

    const INPUT: [usize; 3] = [1, 16, 16];

    fn trunk() -> Vec<BlockSpec> {
        cnn4(&Cnn4Config::tiny(INPUT))
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn base_rejects_zero_epochs_and_is_seeded() {
        let ds = synth(64, 4, 1);
        let cfg = TrainConfig { epochs: 0, ..quick_cfg(1) };
        assert!(train_base(&trunk(), INPUT, 4, &ds, &ds, &cfg).is_err());
        let (a, _) = train_base(&trunk(), INPUT, 4, &ds, &ds, &quick_cfg(3)).unwrap();
        let (b, _) = train_base(&trunk(), INPUT, 4, &ds, &ds, &quick_cfg(3)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn deep_rejects_duplicate_or_single_seed() {
        let ds = synth(16, 4, 1);
        assert!(train_deep(&trunk(), INPUT, 4, &[5, 5], &ds, &ds, &quick_cfg(0), false).is_err());
        assert!(train_deep(&trunk(), INPUT, 4, &[5], &ds, &ds, &quick_cfg(0), false).is_err());
    }

    #[test]
    fn deep_parallel_matches_sequential() {
        let ds = synth(64, 4, 2);
        let seq = train_deep(&trunk(), INPUT, 4, &[1, 2, 3], &ds, &ds, &quick_cfg(0), false).unwrap();
        let par = train_deep(&trunk(), INPUT, 4, &[1, 2, 3], &ds, &ds, &quick_cfg(0), true).unwrap();
        for (a, b) in seq.members.iter().zip(&par.members) {
            assert_eq!(a.params(), b.params());
        }
        assert_ne!(seq.members[0].params(), seq.members[1].params());
    }

    #[test]
    fn deep_prediction_is_hand_average() {
        let ds = synth(8, 4, 3);
        let members = (1..=2)
            .map(|s| build_graph(base_spec(&trunk(), INPUT, 4), &mut init_rng(s)).unwrap())
            .collect();
        let ens = EnsembleOfGraphs::new(members, vec![1, 2]).unwrap();
        let x = ds.all_tensor();
        let p = deep_predict(&ens, &x).unwrap();
        let single: Vec<Vec<EnsemblePrediction>> = ens
            .members
            .iter()
            .map(|m| BasePredictor { graph: m.clone() }.predict(&x).unwrap())
            .collect();
        for i in 0..x.batch() {
            for c in 0..4 {
                let hand = (single[0][i].mean_probs[c] + single[1][i].mean_probs[c]) / 2.0;
                assert!((p[i].mean_probs[c] - hand).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ensemble_dir_round_trip() {
        let members = (1..=2)
            .map(|s| build_graph(base_spec(&trunk(), INPUT, 4), &mut init_rng(s)).unwrap())
            .collect();
        let ens = EnsembleOfGraphs::new(members, vec![1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path()).unwrap();
        let back = EnsembleOfGraphs::load(dir.path()).unwrap();
        assert_eq!(back.seeds, vec![1, 2]);
        assert_eq!(back.members[1].params(), ens.members[1].params());
        let m: EnsembleManifest = serde_json::from_str(&fs::read_to_string(dir.path().join(ENSEMBLE_MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.architecture_hash.len(), 64);
    }

    fn mcd_graph(rate: f32) -> NetworkGraph {
        let t = trunk();
        let locs = vec![after_layer(&t, 1).unwrap(), after_layer(&t, 2).unwrap()];
        build_mcd(&t, INPUT, 4, &locs, rate, &mut Rng::new(7, 0)).unwrap()
    }

    #[test]
    fn mcd_rate_validated() {
        let t = trunk();
        let locs = vec![after_layer(&t, 1).unwrap()];
        for r in [0.0, 1.0, -0.1] {
            assert!(build_mcd(&t, INPUT, 4, &locs, r, &mut Rng::new(0, 0)).is_err());
        }
    }

    #[test]
    fn mcd_tiny_rate_matches_single_pass() {
        let g = mcd_graph(1e-9);
        let x = synth(8, 4, 4).all_tensor();
        let p = mcd_predict(&g, &x, 5, 1).unwrap();
        let base = BasePredictor { graph: g.clone() }.predict(&x).unwrap();
        for (a, b) in p.iter().zip(&base) {
            assert!(a.member_probs.iter().all(|m| *m == b.mean_probs));
            for (x, y) in a.mean_probs.iter().zip(&b.mean_probs) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mcd_passes_vary_at_half_rate() {
        let g = mcd_graph(0.5);
        let x = Tensor::random_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut Rng::new(3, 3));
        let p = mcd_predict(&g, &x, 100, 9).unwrap();
        let col: Vec<f64> = p[0].member_probs.iter().map(|r| r[0]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(var > 0.0);
        assert_eq!(mcd_predict(&g, &x, 100, 9).unwrap(), p);
    }

    #[test]
    fn mcd_without_dropout_equals_base() {
        let g = mcd_graph(0.1);
        let mut base = build_graph(base_spec(&trunk(), INPUT, 4), &mut Rng::new(0, 0)).unwrap();
        for (name, p) in base.params_mut().iter_mut() {
            p.value = g.params().by_name(name).unwrap().value.clone();
        }
        let x = synth(8, 4, 5).all_tensor();
        let a = BasePredictor { graph: g }.predict(&x).unwrap();
        let b = BasePredictor { graph: base }.predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ee_ensemble_members_and_size() {
        let t = cnn4(&Cnn4Config::mnist());
        let locs = vec![after_layer(&t, 1).unwrap(), after_layer(&t, 2).unwrap()];
        let ee = build_ee_ensemble(&t, [1, 28, 28], 10, &locs, DEFAULT_EE_HIDDEN, &mut Rng::new(0, 0)).unwrap();
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        assert_eq!(ee_predict(&ee, &x).unwrap()[0].members(), 3);
        let q = crate::qute::attach_qute_heads(&t, [1, 28, 28], 10, 2, &locs, &mut Rng::new(0, 0)).unwrap();
        assert!(ee.param_count(true) > q.param_count(true));
        let flat = build_ee_ensemble(&t, [1, 28, 28], 10, &locs, 0, &mut Rng::new(0, 0)).unwrap();
        assert!(flat.param_count(true) < ee.param_count(true));
        assert!(!flat.spec().exits.iter().any(|e| e.head.iter().any(|b| b.name.ends_with("/hidden"))));
    }

    #[test]
    fn ee_training_runs_without_transfer() {
        let ds = synth(32, 4, 6);
        let t = trunk();
        let mut g = build_ee_ensemble(&t, INPUT, 4, &[after_layer(&t, 1).unwrap()], 8, &mut Rng::new(0, 0)).unwrap();
        let log = train_ee_ensemble(&mut g, &ds, &ds, &quick_cfg(0)).unwrap();
        assert!(log.batch_losses.contains_key("aux1"));
    }

    fn calibrated_logits(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed, 11);
        let logits = Tensor::random_uniform(&[n, 4], -3.0, 3.0, &mut rng);
        let labels = (0..n)
            .map(|i| {
                let p = ops::softmax_row(logits.row(i));
                let u = rng.next_f64();
                let mut acc = 0.0;
                p.iter()
                    .position(|&q| {
                        acc += q;
                        u < acc
                    })
                    .unwrap_or(3)
            })
            .collect();
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_fit_unit_temperature() {
        let (z, y) = calibrated_logits(20_000, 1);
        let t = fit_temperature(&z, &y).unwrap().value();
        assert!((t - 1.0).abs() < 0.05, "t = {t}");
    }

    #[test]
    fn doubling_logits_doubles_temperature() {
        let (z, y) = calibrated_logits(5000, 2);
        let mut z2 = z.clone();
        z2.scale(2.0);
        let t1 = fit_temperature(&z, &y).unwrap().value();
        let t2 = fit_temperature(&z2, &y).unwrap().value();
        assert!((t2 - 2.0 * t1).abs() < 1e-3, "{t1} {t2}");
    }

    #[test]
    fn single_class_validation_is_degenerate() {
        let z = Tensor::zeros(&[3, 2]);
        assert!(matches!(fit_temperature(&z, &[1, 1, 1]), Err(Error::Degenerate(_))));
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn unit_temperature_is_softmax() {
        let (z, _) = calibrated_logits(10, 3);
        let p = apply_temperature(&z, Temperature::new(1.0).unwrap());
        for (i, row) in p.iter().enumerate() {
            let want = ops::softmax_row(z.row(i));
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
