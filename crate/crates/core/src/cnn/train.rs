use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;

use super::net::{cross_entropy, softmax_rows};
use super::{build_model, ModelSpec, Network, Param};
use crate::dci::AppLabel;
use crate::error::{Error, Result};
use crate::features::{FeatureRow, WindowSample};
use crate::rng::{derive_seed, seeded};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Adaptive moment estimation with the usual `beta1 = 0.9`,
    /// `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
    /// Plain mini-batch gradient descent with optional momentum.
    Sgd { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Fraction of each class held out for validation.
    pub validation_fraction: f64,
    /// Downsample every class to the size of the smallest one.
    pub balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            validation_fraction: 0.1,
            balance: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction must lie in (0, 1)"));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::invalid("momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Per-epoch curves recorded during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

impl TrainingHistory {
    /// Epoch with the lowest validation loss; the first one on ties.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &l) in self.val_loss.iter().enumerate() {
            if l.is_finite() && best.is_none_or(|b| l < self.val_loss[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Validation accuracy of the returned weights.
    pub fn selected_val_accuracy(&self) -> Option<f64> {
        self.best_epoch()
            .or(self.val_accuracy.len().checked_sub(1))
            .and_then(|i| self.val_accuracy.get(i).copied())
    }
}

/// A trained network together with the class order and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub network: Network,
    pub classes: Vec<AppLabel>,
    pub seed: u64,
    pub epochs: u32,
    pub history: TrainingHistory,
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs.get(best).copied().unwrap_or(f64::NAN))
}

impl ModelBundle {
    pub fn new(network: Network, classes: Vec<AppLabel>) -> Result<Self> {
        if classes.len() != network.spec().n_classes {
            return Err(Error::Shape {
                expected: format!("{} class names", network.spec().n_classes),
                got: format!("{}", classes.len()),
            });
        }
        let distinct: BTreeSet<_> = classes.iter().collect();
        if distinct.len() != classes.len() {
            return Err(Error::invalid("duplicate class name"));
        }
        Ok(ModelBundle {
            network,
            classes,
            seed: 0,
            epochs: 0,
            history: TrainingHistory::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.network.spec()
    }

    pub fn window(&self) -> usize {
        self.spec().window
    }

    pub fn class_index(&self, label: &AppLabel) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Class probabilities for one sample. With `training` set, dropout is
    /// sampled from a generator seeded by the bundle seed and the sample start.
    pub fn forward(&self, sample: &WindowSample, training: bool) -> Result<Vec<f64>> {
        let x = self.network.batch_input(&[sample])?;
        let mut z = if training {
            let mut rng = seeded(derive_seed(self.seed, sample.t_start_ms));
            self.network.logits(x, 1, Some(&mut rng))
        } else {
            self.network.logits(x, 1, None)
        };
        softmax_rows(&mut z);
        Ok(z.into_raw_vec_and_offset().0)
    }

    /// Probabilities for many samples at once, one row per sample.
    pub fn probabilities(&self, samples: &[&WindowSample]) -> Result<Array2<f64>> {
        let n = self.spec().n_classes;
        let mut out = Array2::zeros((samples.len(), n));
        for (chunk_idx, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
            let x = self.network.batch_input(chunk)?;
            let p = self.network.probabilities(x, chunk.len());
            let start = chunk_idx * EVAL_BATCH;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&p);
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<(AppLabel, f64)> {
        let p = self.forward(sample, false)?;
        let (i, conf) = argmax(&p);
        Ok((self.classes[i].clone(), conf))
    }

    /// `(class index, confidence)` per sample.
    pub fn predict_batch(&self, samples: &[&WindowSample]) -> Result<Vec<(usize, f64)>> {
        let p = self.probabilities(samples)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect())
    }
}

/// Keeps `min_count` samples of every class, chosen by a seeded shuffle.
/// Returns indices into `samples`, grouped by class in `classes` order.
pub fn balance_classes(samples: &[WindowSample], classes: &[AppLabel], seed: u64) -> Result<Vec<usize>> {
    let groups = group_by_class(samples, classes)?;
    let min = groups.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(min * groups.len());
    for mut g in groups {
        g.shuffle(&mut rng);
        g.truncate(min);
        g.sort_unstable();
        out.extend(g);
    }
    Ok(out)
}

fn group_by_class(samples: &[WindowSample], classes: &[AppLabel]) -> Result<Vec<Vec<usize>>> {
    let index: BTreeMap<&AppLabel, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut groups = vec![Vec::new(); classes.len()];
    for (i, s) in samples.iter().enumerate() {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {i} has no label")))?;
        let c = index
            .get(label)
            .ok_or_else(|| Error::invalid(format!("sample {i}: unknown class {label}")))?;
        groups[*c].push(i);
    }
    for (c, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::invalid(format!("class {} has no samples", classes[c])));
        }
    }
    Ok(groups)
}

/// Trains a model with classes ordered by name.
pub fn train(samples: &[WindowSample], cfg: &TrainConfig) -> Result<ModelBundle> {
    let classes: BTreeSet<AppLabel> = samples.iter().filter_map(|s| s.label.clone()).collect();
    train_with_classes(samples, &classes.into_iter().collect::<Vec<_>>(), cfg)
}

/// Trains a model whose output column `i` is `classes[i]`. The returned
/// weights are those of the epoch with the lowest validation loss.
pub fn train_with_classes(samples: &[WindowSample], classes: &[AppLabel], cfg: &TrainConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let window = samples
        .first()
        .map(WindowSample::len)
        .ok_or_else(|| Error::invalid("empty training set"))?;
    if let Some(s) = samples.iter().find(|s| s.len() != window) {
        return Err(Error::Shape {
            expected: format!("{window} rows per sample"),
            got: format!("{} rows", s.len()),
        });
    }
    if classes.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }

    let mut groups = group_by_class(samples, classes)?;
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    if cfg.balance {
        let min = groups.iter().map(Vec::len).min().unwrap_or(0);
        for g in &mut groups {
            g.shuffle(&mut rng);
            g.truncate(min);
        }
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for g in &mut groups {
        g.shuffle(&mut rng);
        let n_val = ((g.len() as f64 * cfg.validation_fraction).round() as usize).min(g.len() - 1);
        let n_val = if g.len() >= 2 { n_val.max(1) } else { 0 };
        val_idx.extend_from_slice(&g[..n_val]);
        train_idx.extend_from_slice(&g[n_val..]);
    }
    let targets = class_targets(samples, classes);

    let spec = build_model(window, FeatureRow::N_FEATURES, classes.len())?;
    let mut net = Network::new(spec, derive_seed(cfg.seed, 2))?;
    let mut opt = Optimizer::new(cfg, &net);
    let mut shuffle_rng = seeded(derive_seed(cfg.seed, 3));
    let mut dropout_rng = seeded(derive_seed(cfg.seed, 4));
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, Network)> = None;

    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let refs: Vec<&WindowSample> = batch.iter().map(|&i| &samples[i]).collect();
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let x = net.batch_input(&refs)?;
            let (logits, caches) = net.forward_train(x, batch.len(), Some(&mut dropout_rng));
            loss_sum += cross_entropy(&logits, &t) * batch.len() as f64;
            let grads = net.backward(&logits, &caches, &t);
            opt.step(&mut net, &grads);
        }
        history.train_loss.push(loss_sum / train_idx.len() as f64);
        let (vl, va) = evaluate(&net, samples, &val_idx, &targets)?;
        history.val_loss.push(vl);
        history.val_accuracy.push(va);
        if vl.is_finite() && best.as_ref().is_none_or(|(b, _)| vl < *b) {
            best = Some((vl, net.clone()));
        }
    }
    if let Some((_, n)) = best {
        net = n;
    }

    let mut bundle = ModelBundle::new(net, classes.to_vec())?;
    bundle.seed = cfg.seed;
    bundle.epochs = cfg.epochs as u32;
    bundle.history = history;
    Ok(bundle)
}

fn class_targets(samples: &[WindowSample], classes: &[AppLabel]) -> Vec<usize> {
    samples
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .and_then(|l| classes.iter().position(|c| c == l))
                .unwrap_or(usize::MAX)
        })
        .collect()
}

fn evaluate(net: &Network, samples: &[WindowSample], idx: &[usize], targets: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let z = net.logits(net.batch_input(&refs)?, chunk.len(), None);
        loss += cross_entropy(&z, &t) * chunk.len() as f64;
        for (row, &y) in z.rows().into_iter().zip(&t) {
            if argmax(row.as_slice().expect("standard layout")).0 == y {
                correct += 1;
            }
        }
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

struct Moments {
    m: Param,
    v: Param,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    state: Vec<Moments>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, net: &Network) -> Self {
        let state = net
            .params()
            .iter()
            .map(|p| Moments {
                m: Param {
                    w: Array2::zeros(p.w.raw_dim()),
                    b: Array1::zeros(p.b.raw_dim()),
                },
                v: Param {
                    w: Array2::zeros(p.w.raw_dim()),
                    b: Array1::zeros(p.b.raw_dim()),
                },
            })
            .collect();
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            t: 0,
            state,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Param]) {
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (Self::BETA1, Self::BETA2, Self::EPS);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                let step = lr * c2.sqrt() / c1;
                let eps_hat = eps * c2.sqrt();
                for ((p, g), s) in net.params_mut().into_iter().zip(grads).zip(&mut self.state) {
                    Zip::from(&mut p.w)
                        .and(&g.w)
                        .and(&mut s.m.w)
                        .and(&mut s.v.w)
                        .for_each(|w, &g, m, v| adam(w, g, m, v, b1, b2, step, eps_hat));
                    Zip::from(&mut p.b)
                        .and(&g.b)
                        .and(&mut s.m.b)
                        .and(&mut s.v.b)
                        .for_each(|w, &g, m, v| adam(w, g, m, v, b1, b2, step, eps_hat));
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), s) in net.params_mut().into_iter().zip(grads).zip(&mut self.state) {
                    Zip::from(&mut p.w).and(&g.w).and(&mut s.m.w).for_each(|w, &g, m| {
                        *m = momentum * *m - lr * g;
                        *w += *m;
                    });
                    Zip::from(&mut p.b).and(&g.b).and(&mut s.m.b).for_each(|w, &g, m| {
                        *m = momentum * *m - lr * g;
                        *w += *m;
                    });
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam(w: &mut f64, g: f64, m: &mut f64, v: &mut f64, b1: f64, b2: f64, step: f64, eps_hat: f64) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    *w -= step * *m / (v.sqrt() + eps_hat);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dci::Rnti;
    use rand::Rng;

    /// Two separable toy classes: class "hi" has large TBS, "lo" small.
    pub(crate) fn toy_samples(window: usize, per_class: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = seeded(seed);
        let mut out = Vec::new();
        for (label, scale) in [("hi", 20.0), ("lo", 2.0)] {
            for k in 0..per_class {
                let rows = (0..window)
                    .map(|_| FeatureRow {
                        direction: if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 },
                        tbs_kb: scale * rng.random_range(0.5..1.5),
                        dt_s: rng.random_range(0.0..0.5),
                    })
                    .collect();
                out.push(WindowSample {
                    rows,
                    label: Some(AppLabel::from(label)),
                    rnti: Rnti(1),
                    t_start_ms: k as u64,
                    t_end_ms: k as u64 + 1,
                });
            }
        }
        out
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.1, 0.1]), (1, 0.7));
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(argmax(&[0.25; 4]), (0, 0.25));
    }

    #[test]
    fn learns_separable_toy_problem() {
        let data = toy_samples(20, 60, 1);
        let b = train(&data, &quick_cfg(7)).unwrap();
        assert_eq!(b.classes, vec![AppLabel::from("hi"), AppLabel::from("lo")]);
        assert_eq!(b.history.val_accuracy.len(), 3);
        assert!(*b.history.val_accuracy.last().unwrap() >= 0.9);
    }

    #[test]
    fn best_epoch_is_lowest_finite_validation_loss() {
        let h = TrainingHistory {
            train_loss: vec![1.0; 4],
            val_loss: vec![f64::NAN, 0.4, 0.2, 0.2],
            val_accuracy: vec![0.1, 0.6, 0.9, 0.8],
        };
        assert_eq!(h.best_epoch(), Some(2));
        assert_eq!(h.selected_val_accuracy(), Some(0.9));
        let empty = TrainingHistory {
            val_loss: vec![f64::NAN],
            val_accuracy: vec![f64::NAN],
            ..TrainingHistory::default()
        };
        assert_eq!(empty.best_epoch(), None);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_samples(20, 30, 2);
        let a = train(&data, &quick_cfg(3)).unwrap();
        let b = train(&data, &quick_cfg(3)).unwrap();
        assert_eq!(a, b);
        let c = train(&data, &quick_cfg(4)).unwrap();
        assert_ne!(a.network, c.network);
    }

    #[test]
    fn outputs_are_distributions_and_inference_is_deterministic() {
        let data = toy_samples(20, 10, 3);
        let b = train(&data, &quick_cfg(1)).unwrap();
        for s in &data {
            let p = b.forward(s, false).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_eq!(p, b.forward(s, false).unwrap());
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_output() {
        let data = toy_samples(20, 5, 4);
        let mut b = train(&data, &quick_cfg(1)).unwrap();
        {
            let mut ps = b.network.params_mut();
            let last = ps.last_mut().unwrap();
            last.w.fill(0.0);
            last.b.fill(0.0);
        }
        let p = b.forward(&data[0], false).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(b.predict(&data[0]).unwrap(), (AppLabel::from("hi"), 0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut data = toy_samples(20, 5, 5);
        data[3].rows.pop();
        assert!(matches!(train(&data, &quick_cfg(1)), Err(Error::Shape { .. })));

        let one_class: Vec<_> = toy_samples(20, 5, 5).into_iter().take(5).collect();
        assert!(train(&one_class, &quick_cfg(1)).is_err());

        let data = toy_samples(20, 5, 5);
        let classes = vec![AppLabel::from("hi"), AppLabel::from("lo"), AppLabel::from("absent")];
        assert!(train_with_classes(&data, &classes, &quick_cfg(1)).is_err());

        let mut cfg = quick_cfg(1);
        cfg.validation_fraction = 1.0;
        assert!(train(&data, &cfg).is_err());
    }

    #[test]
    fn wrong_window_rejected_at_inference() {
        let data = toy_samples(20, 5, 6);
        let b = train(&data, &quick_cfg(1)).unwrap();
        let short = toy_samples(10, 1, 6);
        assert!(b.forward(&short[0], false).is_err());
    }

    #[test]
    fn balancing_downsamples_to_minority() {
        let mut data = toy_samples(5, 10, 7);
        data.truncate(14); // 10 "hi", 4 "lo"
        let classes = vec![AppLabel::from("hi"), AppLabel::from("lo")];
        let idx = balance_classes(&data, &classes, 1).unwrap();
        assert_eq!(idx.len(), 8);
        assert_eq!(idx.iter().filter(|&&i| i >= 10).count(), 4);
    }

    #[test]
    fn permuted_class_order_permutes_outputs() {
        let data = toy_samples(20, 20, 8);
        let ab = vec![AppLabel::from("hi"), AppLabel::from("lo")];
        let m1 = train_with_classes(&data, &ab, &quick_cfg(2)).unwrap();
        let mut m2 = m1.clone();
        m2.classes.reverse();
        {
            let mut ps = m2.network.params_mut();
            let last = ps.last_mut().unwrap();
            last.w.invert_axis(ndarray::Axis(1));
            last.w = last.w.as_standard_layout().into_owned();
            last.b.invert_axis(ndarray::Axis(0));
            last.b = last.b.as_standard_layout().into_owned();
        }
        for s in &data {
            let mut p1 = m1.forward(s, false).unwrap();
            p1.reverse();
            assert_eq!(p1, m2.forward(s, false).unwrap());
            assert_eq!(m1.predict(s).unwrap(), m2.predict(s).unwrap());
        }
    }

    #[test]
    fn either_class_order_learns_the_labels() {
        let data = toy_samples(20, 60, 8);
        let ab = vec![AppLabel::from("hi"), AppLabel::from("lo")];
        let ba = vec![AppLabel::from("lo"), AppLabel::from("hi")];
        for classes in [ab, ba] {
            let cfg = TrainConfig {
                epochs: 10,
                ..quick_cfg(2)
            };
            let m = train_with_classes(&data, &classes, &cfg).unwrap();
            assert_eq!(m.classes, classes);
            let correct = data
                .iter()
                .filter(|s| m.predict(s).unwrap().0 == *s.label.as_ref().unwrap())
                .count();
            assert!(correct as f64 / data.len() as f64 >= 0.9, "{correct} {:?}", m.history);
        }
    }

    #[test]
    fn sgd_also_trains() {
        let data = toy_samples(20, 40, 9);
        let mut cfg = quick_cfg(1);
        cfg.optimizer = OptimizerKind::Sgd { momentum: 0.9 };
        cfg.learning_rate = 0.01;
        cfg.epochs = 5;
        let b = train(&data, &cfg).unwrap();
        assert!(b.history.train_loss.last().unwrap() < &b.history.train_loss[0]);
    }
}
