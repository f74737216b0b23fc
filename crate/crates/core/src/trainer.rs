//! Parameter partitioning, cross-entropy objective, rectified adaptive-moment
//! optimization, dataset splitting and the training loop.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::{Dataset, Item};
use crate::error::{Error, Result};
use crate::heads::{PatchHead, WsiHead};
use crate::metrics::{argmax, evaluate_scores, MetricReport};
use crate::model::{ModelSpec, PathoTuneModel, TaskLevel, TuningMode};
use crate::params::{GroupSet, ParamGroup, ParamId, ParamStore};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
    pub groups: GroupSet,
    pub trainable_count: usize,
    pub frozen_count: usize,
    /// Frozen text-encoder parameters, kept out of both counts above.
    pub text_encoder_count: usize,
}

/// Splits the model's parameters into trainable and frozen sets for `mode`.
/// The text encoder is never trainable and lives outside the store.
pub fn partition_params(model: &PathoTuneModel, mode: TuningMode) -> Partition {
    let groups = mode.trainable_groups();
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    let (mut tc, mut fc) = (0, 0);
    for (id, p) in model.store.iter() {
        if groups.contains(p.group) {
            trainable.push(id);
            tc += p.value.len();
        } else {
            frozen.push(id);
            fc += p.value.len();
        }
    }
    Partition {
        trainable,
        frozen,
        groups,
        trainable_count: tc,
        frozen_count: fc,
        text_encoder_count: model.text_encoder().map_or(0, |e| e.param_count()),
    }
}

/// Trainable parameters over all parameters except the frozen text encoder.
pub fn count_trainable_fraction(partition: &Partition) -> f64 {
    let total = partition.trainable_count + partition.frozen_count;
    if total == 0 {
        0.0
    } else {
        partition.trainable_count as f64 / total as f64
    }
}

/// Per-group parameter counts derived from configuration alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub tvp: usize,
    pub text_projection: usize,
    pub vrm: usize,
    pub head: usize,
    pub text_encoder: usize,
}

impl ParamCounts {
    pub fn analytic(spec: &ModelSpec, mode: TuningMode) -> Self {
        let cfg = &spec.model;
        let (ttp, tvp, ivp) = mode.prompt_flags();
        let c = cfg.dim;
        Self {
            backbone: cfg.backbone_param_count(),
            tvp: if tvp { cfg.layers * spec.prompts.tvp_tokens * c } else { 0 },
            text_projection: if ttp {
                let d = spec.text.dim;
                let out = spec.prompts.ttp_tokens * c;
                d * out + out
            } else {
                0
            },
            vrm: if ivp { spec.vrm.param_count(c) } else { 0 },
            head: match spec.level {
                TaskLevel::Patch => PatchHead::param_count(c, cfg.num_classes),
                TaskLevel::Wsi => WsiHead::param_count(c, spec.wsi_attention_dim, cfg.num_classes),
            },
            text_encoder: if ttp { spec.text.buckets * spec.text.dim } else { 0 },
        }
    }

    pub fn from_store(store: &ParamStore, text_encoder: usize) -> Self {
        Self {
            backbone: store.count(ParamGroup::Backbone),
            tvp: store.count(ParamGroup::Tvp),
            text_projection: store.count(ParamGroup::TextProjection),
            vrm: store.count(ParamGroup::Vrm),
            head: store.count(ParamGroup::Head),
            text_encoder,
        }
    }

    pub fn get(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Tvp => self.tvp,
            ParamGroup::TextProjection => self.text_projection,
            ParamGroup::Vrm => self.vrm,
            ParamGroup::Head => self.head,
        }
    }

    /// Total excluding the text encoder.
    pub fn total(&self) -> usize {
        ParamGroup::ALL.iter().map(|g| self.get(*g)).sum()
    }

    pub fn trainable(&self, mode: TuningMode) -> usize {
        mode.trainable_groups().iter().map(|g| self.get(g)).sum()
    }

    pub fn fraction(&self, mode: TuningMode) -> f64 {
        self.trainable(mode) as f64 / self.total() as f64
    }
}

/// Softmax cross-entropy of one logit vector.
pub fn loss(logits: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Input(format!("label {label} outside 0..{}", logits.len())));
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Radam,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub mode: TuningMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Radam,
            mode: TuningMode::ALL_PROMPTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
    pub steps: u64,
}

/// Adaptive-moment optimizer with optional variance rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<ParamId, MomentState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, store: &ParamStore, partition: &Partition) -> Self {
        let moments = partition
            .trainable
            .iter()
            .map(|&id| {
                let shape = store.value(id).dim();
                (
                    id,
                    MomentState {
                        first: Array2::zeros(shape),
                        second: Array2::zeros(shape),
                        steps: 0,
                    },
                )
            })
            .collect();
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&MomentState> {
        self.moments.get(&id)
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Applies one update. Parameters without a gradient entry are skipped;
    /// a gradient for an untracked (frozen) parameter is rejected before any
    /// parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if let Some(id) = grads.ids().find(|id| !self.moments.contains_key(id)) {
            return Err(Error::Contract(format!(
                "gradient supplied for frozen parameter `{}`",
                store.get(id).name
            )));
        }
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        for (id, g) in grads.iter() {
            let state = self.moments.get_mut(&id).expect("checked above");
            let value = store.value_mut(id);
            if g.dim() != value.dim() {
                return Err(Error::shape(
                    format!("gradient of {}", id.index()),
                    format!("{:?}", value.dim()),
                    format!("{:?}", g.dim()),
                ));
            }
            state.steps += 1;
            let t = state.steps as f64;
            Zip::from(&mut state.first).and(g).for_each(|m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            Zip::from(&mut state.second).and(g).for_each(|v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            match self.kind {
                OptimizerKind::Adam => {
                    Zip::from(value).and(&state.first).and(&state.second).for_each(|p, &m, &v| {
                        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    });
                }
                OptimizerKind::Radam => {
                    let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                    if rho_t > 5.0 {
                        let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
                        Zip::from(value).and(&state.first).and(&state.second).for_each(|p, &m, &v| {
                            *p -= lr * (m / bc1) * r * bc2.sqrt() / (v.sqrt() + eps);
                        });
                    } else {
                        Zip::from(value).and(&state.first).for_each(|p, &m| *p -= lr * (m / bc1));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything the training loop owns.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PathoTuneModel,
    pub optimizer: Optimizer,
    pub partition: Partition,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: PathoTuneModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let partition = partition_params(&model, cfg.mode);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.store, &partition);
        Ok(Self {
            model,
            optimizer,
            partition,
            step: 0,
            epoch: 0,
            rng: rng_for(cfg.seed, "shuffle", 0),
        })
    }
}

pub fn optimizer_step(state: &mut TrainState, grads: &Gradients) -> Result<()> {
    state.optimizer.step(&mut state.model.store, grads)?;
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_auc: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Loss of one example and `scale * d loss` for every parameter in `groups`.
pub fn loss_and_grads(model: &PathoTuneModel, item: Item<'_>, groups: GroupSet, scale: f64) -> Result<(f64, bool, Gradients)> {
    let mut tape = Tape::new(&model.store, groups);
    let logits = model.trace_logits(&mut tape, item)?;
    let label = item.label();
    let classes = tape.shape(logits).1;
    if label >= classes {
        return Err(Error::Input(format!("label {label} outside 0..{classes}")));
    }
    let correct = argmax(tape.value(logits).as_slice().expect("contiguous row")) == label;
    let l = tape.cross_entropy(logits, label);
    let value = tape.value(l)[[0, 0]];
    Ok((value, correct, tape.backward(l, scale)))
}

fn check_labels(dataset: &Dataset, classes: usize, name: &str) -> Result<()> {
    match dataset.labels().into_iter().find(|l| *l >= classes) {
        Some(l) => Err(Error::Input(format!("{name} label {l} outside 0..{classes}"))),
        None => Ok(()),
    }
}

pub fn predict_proba(model: &PathoTuneModel, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| model.probabilities(dataset.item(i)).map(|p| p.to_vec()))
        .collect()
}

pub fn evaluate(model: &PathoTuneModel, dataset: &Dataset) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let probs = predict_proba(model, dataset)?;
    evaluate_scores(&probs, &dataset.labels(), model.config().num_classes)
}

/// Runs one epoch of shuffled mini-batch updates; returns mean loss and accuracy.
pub fn train_epoch(state: &mut TrainState, train: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);
    let groups = state.partition.groups;
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in order.chunks(batch_size) {
        let scale = 1.0 / batch.len() as f64;
        let model = &state.model;
        let results: Vec<(f64, bool, Gradients)> = batch
            .par_iter()
            .map(|&i| loss_and_grads(model, train.item(i), groups, scale))
            .collect::<Result<_>>()?;
        let mut total = Gradients::default();
        for (l, ok, g) in results {
            loss_sum += l;
            correct += ok as usize;
            total.merge(g);
        }
        optimizer_step(state, &total)?;
    }
    state.epoch += 1;
    let n = train.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Trains for `cfg.epochs` epochs, validating after each one when `val` is non-empty.
pub fn fit(train: &Dataset, val: &Dataset, model: PathoTuneModel, cfg: &TrainConfig) -> Result<(TrainState, History)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if model.mode != cfg.mode {
        return Err(Error::Config(format!(
            "model was built for {} but training config requests {}",
            model.mode, cfg.mode
        )));
    }
    let classes = model.config().num_classes;
    check_labels(train, classes, "training")?;
    check_labels(val, classes, "validation")?;

    let mut state = TrainState::new(model, cfg)?;
    let mut history = History::default();
    for _ in 0..cfg.epochs {
        let (train_loss, train_accuracy) = train_epoch(&mut state, train, cfg.batch_size)?;
        let (val_auc, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&state.model, val)?;
            (report.auc, Some(report.f1))
        };
        history.records.push(EpochRecord {
            epoch: state.epoch,
            train_loss,
            train_accuracy,
            val_auc,
            val_f1,
        });
    }
    Ok((state, history))
}

fn largest_remainder(n: usize, ratios: &[usize]) -> Result<Vec<usize>> {
    let denom: usize = ratios.iter().sum();
    if denom == 0 {
        return Err(Error::Input("split ratios must not all be zero".into()));
    }
    let mut sizes: Vec<usize> = ratios.iter().map(|r| n * r / denom).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..ratios.len()).collect();
    // stable sort keeps the lower index first among equal remainders
    by_remainder.sort_by_key(|&i| std::cmp::Reverse((n * ratios[i]) % denom));
    for i in by_remainder {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Shuffled train/val/test index sets sized by largest-remainder rounding.
pub fn split_indices(n: usize, ratios: (usize, usize, usize), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Input(format!("split_dataset needs at least 10 items, got {n}")));
    }
    let sizes = largest_remainder(n, &[ratios.0, ratios.1, ratios.2])?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "split", 0));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok((idx, val, test))
}

pub fn split_dataset<T: Clone>(items: &[T], ratios: (usize, usize, usize), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = split_indices(items.len(), ratios, seed)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(a), pick(b), pick(c)))
}

/// `k` (train, validation) index folds; validation parts partition `0..n`
/// and differ in size by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Input(format!("kfold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Input(format!("kfold needs at least {k} items, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "kfold", k as u64));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val = idx[start..start + len].to_vec();
        let train = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}

pub fn kfold<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok(kfold_indices(items.len(), k, seed)?
        .into_iter()
        .map(|(t, v)| (pick(&t), pick(&v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        let uniform = Array1::from_elem(5, 0.3);
        assert!((loss(&uniform, 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        let confident = Array1::from_vec(vec![60.0, 0.0]);
        assert!(loss(&confident, 0).unwrap() < 1e-25);
        let l = loss(&Array1::from_vec(vec![2.0, 0.0]), 0).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.1269).abs() < 1e-4);
        assert!(matches!(loss(&uniform, 5), Err(Error::Input(_))));
    }

    fn scalar_setup(kind: OptimizerKind, lr: f64) -> (ParamStore, ParamId, ParamId, Optimizer) {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Head, Array2::from_elem((1, 1), 0.5));
        let frozen = store.add("b", ParamGroup::Backbone, Array2::from_elem((1, 1), 1.0));
        let partition = Partition {
            trainable: vec![w],
            frozen: vec![frozen],
            groups: [ParamGroup::Head].into_iter().collect(),
            trainable_count: 1,
            frozen_count: 1,
            text_encoder_count: 0,
        };
        let opt = Optimizer::new(kind, lr, &store, &partition);
        (store, w, frozen, opt)
    }

    /// Independent scalar recurrence for f(x) = (x - 3)^2 / 2.
    fn radam_oracle(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let rho_max = 2.0 / (1.0 - b2) - 1.0;
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps as i32 {
            let g = x - 3.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let b2t = b2.powi(t);
            let rho = rho_max - 2.0 * t as f64 * b2t / (1.0 - b2t);
            if rho > 5.0 {
                let v_hat = (v / (1.0 - b2t)).sqrt();
                let r = ((rho - 4.0) * (rho - 2.0) * rho_max / ((rho_max - 4.0) * (rho_max - 2.0) * rho)).sqrt();
                x -= lr * r * m_hat / (v_hat + eps / (1.0 - b2t).sqrt());
            } else {
                x -= lr * m_hat;
            }
            out.push(x);
        }
        out
    }

    #[test]
    fn radam_matches_scalar_oracle() {
        for steps in [5, 12] {
            let (mut store, w, _, mut opt) = scalar_setup(OptimizerKind::Radam, 0.1);
            let expected = radam_oracle(0.5, 0.1, steps);
            for want in expected {
                let mut grads = Gradients::default();
                grads.insert(w, Array2::from_elem((1, 1), store.value(w)[[0, 0]] - 3.0));
                opt.step(&mut store, &grads).unwrap();
                let got = store.value(w)[[0, 0]];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Radam, OptimizerKind::Adam] {
            let (mut store, w, _, mut opt) = scalar_setup(kind, 0.1);
            let mut grads = Gradients::default();
            grads.insert(w, Array2::zeros((1, 1)));
            opt.step(&mut store, &grads).unwrap();
            assert_eq!(store.value(w)[[0, 0]], 0.5);
            assert_eq!(opt.moments(w).unwrap().steps, 1);
        }
    }

    #[test]
    fn frozen_gradient_is_a_contract_error() {
        let (mut store, w, frozen, mut opt) = scalar_setup(OptimizerKind::Radam, 0.1);
        let mut grads = Gradients::default();
        grads.insert(w, Array2::from_elem((1, 1), 1.0));
        grads.insert(frozen, Array2::from_elem((1, 1), 1.0));
        assert!(matches!(opt.step(&mut store, &grads), Err(Error::Contract(_))));
        assert_eq!(store.value(w)[[0, 0]], 0.5);
        assert_eq!(store.value(frozen)[[0, 0]], 1.0);
        assert!(opt.moments(frozen).is_none());
    }

    #[test]
    fn largest_remainder_sizes() {
        assert_eq!(largest_remainder(10, &[7, 2, 1]).unwrap(), vec![7, 2, 1]);
        assert_eq!(largest_remainder(11, &[7, 2, 1]).unwrap(), vec![8, 2, 1]);
        assert_eq!(largest_remainder(13, &[7, 2, 1]).unwrap(), vec![9, 3, 1]);
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = split_dataset(&items, (7, 2, 1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 2, 1));
        let mut all: Vec<u32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, (7, 2, 1), 3).unwrap(), (a, b, c));
        assert!(split_dataset(&items[..9], (7, 2, 1), 3).is_err());
    }

    #[test]
    fn kfold_cases() {
        let items: Vec<u32> = (0..8).collect();
        let folds = kfold(&items, 4, 1).unwrap();
        assert_eq!(folds.len(), 4);
        let mut seen = Vec::new();
        for (train, val) in &folds {
            assert_eq!(val.len(), 2);
            assert_eq!(train.len(), 6);
            seen.extend(val.iter().copied());
        }
        seen.sort();
        assert_eq!(seen, items);
        assert!(kfold(&items, 1, 1).is_err());
        assert!(kfold(&items[..3], 4, 1).is_err());
    }
}
