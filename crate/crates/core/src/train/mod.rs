//! Training and evaluation.
//!
//! All randomness of a run derives from `(seed, iteration)`: the sample
//! order of epoch `e` is a permutation drawn from stream `(Shuffle, e)` and
//! the augmentation of batch slot `k` at iteration `t` from stream
//! `(Augment, t, k)`. A run resumed from a checkpoint therefore replays the
//! uninterrupted run exactly.

pub mod checkpoint;
pub mod optim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{augment_with, collate, SegSample};
use crate::error::{Error, Result};
use crate::loss::{deep_supervision_loss, LossConfig, LossReport, COMPONENTS};
use crate::metrics::{evaluate, HdVariant, MetricReport, Spacing};
use crate::model::{LucfNet, ModelConfig};
use crate::nn::{Mode, Session};
use crate::tensor::rng::{DetRng, Domain};
use crate::tensor::{round_to_precision, set_precision, Graph, LabelMap, Precision, Tensor};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{lr_schedule, OptimConfig, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 4,
            epochs: 10,
            seed: 0,
            augment: true,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "train_config",
                "batch_size and epochs must be positive",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> u64 {
        num_samples.div_ceil(self.batch_size) as u64
    }

    pub fn max_iter(&self, num_samples: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(num_samples)
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// CSV with columns `iter, lr, total, head1..headK, ce, dice, lovasz,
/// ohem_org, ohem_re`; disabled components are left empty.
pub fn history_csv(rows: &[HistoryRow], heads: usize) -> String {
    let mut out = String::from("iter,lr,total");
    for h in 1..=heads {
        let _ = write!(out, ",head{h}");
    }
    for c in COMPONENTS {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.iter, r.lr, r.report.total);
        for v in &r.report.per_head {
            let _ = write!(out, ",{v}");
        }
        for c in COMPONENTS {
            match r.report.components.get(c) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: LucfNet,
    pub optim: OptimState,
    pub num_samples: usize,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`, for a dataset of
    /// `num_samples` samples.
    pub fn new(cfg: &TrainConfig, num_samples: usize) -> Result<Self> {
        cfg.validate()?;
        if num_samples == 0 {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let mut net = LucfNet::new(&cfg.model, cfg.seed)?;
        {
            let _p = set_precision(cfg.precision);
            for p in net.store.params_mut() {
                round_to_precision(p.value.data_mut());
            }
        }
        let optim = OptimState::new(cfg.optim.clone(), &net.store, cfg.max_iter(num_samples));
        Ok(Self {
            cfg: cfg.clone(),
            net,
            optim,
            num_samples,
        })
    }

    pub fn iter(&self) -> u64 {
        self.optim.iter
    }

    pub fn max_iter(&self) -> u64 {
        self.optim.max_iter
    }

    pub fn is_done(&self) -> bool {
        self.optim.iter >= self.optim.max_iter
    }

    /// Dataset indices of the batch at `iter`.
    pub fn batch_indices(&self, iter: u64) -> Vec<usize> {
        let spe = self.cfg.steps_per_epoch(self.num_samples);
        let (epoch, step) = (iter / spe, (iter % spe) as usize);
        let perm = DetRng::new(self.cfg.seed, Domain::Shuffle, &[epoch]).permutation(self.num_samples);
        let start = step * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(self.num_samples);
        perm[start..end].to_vec()
    }

    fn batch(&self, dataset: &[SegSample], iter: u64) -> Result<(Tensor, LabelMap)> {
        let samples: Vec<SegSample> = self
            .batch_indices(iter)
            .into_iter()
            .enumerate()
            .map(|(slot, i)| {
                if self.cfg.augment {
                    let mut rng = DetRng::new(self.cfg.seed, Domain::Augment, &[iter, slot as u64]);
                    augment_with(&dataset[i], &mut rng)
                } else {
                    dataset[i].clone()
                }
            })
            .collect();
        let refs: Vec<&SegSample> = samples.iter().collect();
        collate(&refs)
    }

    /// One iteration: batch, forward, deep-supervision loss, backward, SGD.
    pub fn step(&mut self, dataset: &[SegSample]) -> Result<HistoryRow> {
        if dataset.len() != self.num_samples {
            return Err(Error::invalid(
                "train",
                format!("dataset has {} samples, run expects {}", dataset.len(), self.num_samples),
            ));
        }
        let iter = self.optim.iter;
        let _p = set_precision(self.cfg.precision);
        let (x, labels) = self.batch(dataset, iter)?;
        labels.check_range(self.cfg.model.num_classes)?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.net.store, Mode::Train);
        let diverged = |e: Error| match e {
            Error::NonFinite { op, .. } => Error::Diverged { iter, component: op },
            other => other,
        };
        let xv = s.graph.constant(x);
        let out = self.net.forward(&mut s, xv).map_err(diverged)?;
        let (total, report) =
            deep_supervision_loss(s.graph, &out.head_logits, &labels, &self.cfg.loss).map_err(diverged)?;
        if let Some(name) = first_non_finite(&report) {
            return Err(Error::Diverged { iter, component: name });
        }
        s.graph.backward(total).map_err(diverged)?;
        let grads = s.param_grads();
        let bn = s.take_bn_updates();
        drop(s);
        let lr = self.optim.step(&mut self.net.store, &grads)?;
        self.net.store.apply_bn_updates(&bn);
        Ok(HistoryRow { iter, lr, report })
    }

    /// Runs until `until` (clamped to the schedule end), calling `on_row`
    /// after every iteration.
    pub fn run(
        &mut self,
        dataset: &[SegSample],
        until: u64,
        mut on_row: impl FnMut(&HistoryRow),
    ) -> Result<Vec<HistoryRow>> {
        let until = until.min(self.optim.max_iter);
        let mut rows = Vec::new();
        while self.optim.iter < until {
            let row = self.step(dataset)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.restore()
    }
}

fn first_non_finite(r: &LossReport) -> Option<String> {
    if let Some((name, _)) = r.components.iter().find(|(_, v)| !v.is_finite()) {
        return Some(name.clone());
    }
    if let Some(i) = r.per_head.iter().position(|v| !v.is_finite()) {
        return Some(format!("head{}", i + 1));
    }
    (!r.total.is_finite()).then(|| "total".to_string())
}

/// Trains a fresh model for the full schedule.
pub fn train(cfg: &TrainConfig, dataset: &[SegSample]) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    let mut t = Trainer::new(cfg, dataset.len())?;
    let rows = t.run(dataset, u64::MAX, |_| {})?;
    Ok((t.checkpoint(), rows))
}

/// Channel argmax of the fused logits (ties to class 0), evaluated in
/// inference mode without augmentation, `batch_size` samples at a time.
pub fn predict_labels(net: &LucfNet, dataset: &[SegSample], batch_size: usize) -> Result<LabelMap> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate_run", "empty dataset"));
    }
    let mut data = Vec::new();
    for chunk in dataset.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, _) = collate(&refs)?;
        let (_, fused) = net.predict(&x, Mode::Eval)?;
        data.extend_from_slice(LabelMap::argmax(&fused)?.data());
    }
    let (h, w) = (dataset[0].height(), dataset[0].width());
    LabelMap::new(&[dataset.len(), h, w], data)
}

pub fn evaluate_run(
    net: &LucfNet,
    dataset: &[SegSample],
    batch_size: usize,
    variant: HdVariant,
    spacing: Option<Spacing>,
) -> Result<MetricReport> {
    let k = net.cfg.num_classes;
    let refs: Vec<&LabelMap> = dataset.iter().map(|s| &s.label).collect();
    let gt = LabelMap::stack(&refs)?;
    if gt.max_label() >= k {
        return Err(Error::invalid(
            "evaluate_run",
            format!("label {} exceeds the model's {k} classes", gt.max_label()),
        ));
    }
    let pred = predict_labels(net, dataset, batch_size)?;
    evaluate(&pred, &gt, k, spacing, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, DatasetSpec};

    fn tiny() -> (TrainConfig, Vec<SegSample>) {
        let cfg = TrainConfig {
            model: ModelConfig {
                base_width: 2,
                heads: [1, 1, 1, 1],
                input_size: (32, 32),
                ..ModelConfig::default()
            },
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let data = gen_synthetic(&DatasetSpec {
            num_samples: 3,
            size: (32, 32),
            ..DatasetSpec::default()
        })
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn batches_cover_each_epoch() {
        let (cfg, data) = tiny();
        let t = Trainer::new(&cfg, data.len()).unwrap();
        assert_eq!(t.max_iter(), 4);
        let mut seen: Vec<usize> = t.batch_indices(0);
        seen.extend(t.batch_indices(1));
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut cfg, data) = tiny();
        cfg.optim.lr = 0.0;
        let mut t = Trainer::new(&cfg, data.len()).unwrap();
        let before = t.net.store.params().to_vec();
        let rows = t.run(&data, u64::MAX, |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(t.net.store.params(), &before[..]);
    }

    #[test]
    fn history_csv_columns() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(&cfg, data.len()).unwrap();
        let rows = t.run(&data, 1, |_| {}).unwrap();
        let csv = history_csv(&rows, 4);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,lr,total,head1,head2,head3,head4,ce,dice,lovasz,ohem_org,ohem_re"
        );
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[7], "");
        assert!(!fields[9].is_empty());
    }

    #[test]
    fn eval_is_batch_size_invariant() {
        let (cfg, data) = tiny();
        let t = Trainer::new(&cfg, data.len()).unwrap();
        let a = evaluate_run(&t.net, &data, 1, HdVariant::Hd95, None).unwrap();
        let b = evaluate_run(&t.net, &data, 3, HdVariant::Hd95, None).unwrap();
        assert_eq!(a, b);
    }
}
