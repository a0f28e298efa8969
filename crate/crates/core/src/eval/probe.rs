use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{tag_metrics, EvalError, LabeledSplit};
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::model::{ProbeHead, ProbeKind, MLP_HIDDEN};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub head: ProbeKind,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Independent probe runs averaged in the report.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            head: ProbeKind::Linear,
            hidden: MLP_HIDDEN,
            lr: 3e-4,
            weight_decay: 1e-6,
            patience: 5,
            max_epochs: 200,
            batch_size: 64,
            seeds: 3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.seeds == 0 {
            return bad("seeds must be >= 1");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("max_epochs, batch_size and hidden must be positive");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

/// Patience-based stopping on a metric that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch`; returns whether it improved and whether
    /// training should stop.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: ProbeHead,
    /// Epochs actually run (1-based count).
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation: f64,
}

fn gather(features: &Tensor, rows: &[usize]) -> Tensor {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(features.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("gathered rows")
}

/// Sigmoid scores of `head` for every row of `features`.
pub fn predict(head: &ProbeHead, features: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    let logits = head.logits(features)?;
    Ok((0..logits.shape()[0])
        .map(|i| logits.row(i).iter().map(|&z| 1.0 / (1.0 + (-z as f64).exp())).collect())
        .collect())
}

/// Validation score: fragment-level macro ROC-AUC over tags that are not
/// constant, or the negated mean BCE when every tag is constant.
fn validation_score(head: &ProbeHead, valid: &LabeledSplit) -> Result<f64, EvalError> {
    let scores = predict(head, &valid.reps.features)?;
    let labels = valid.fragment_labels();
    match tag_metrics(&scores, &labels) {
        Ok(m) => Ok(m.roc_auc),
        Err(EvalError::NoEvaluableTags) => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (s, l) in scores.iter().zip(&labels) {
                for (&p, &y) in s.iter().zip(l) {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    total -= y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln();
                    count += 1;
                }
            }
            Ok(-total / count as f64)
        }
        Err(e) => Err(e),
    }
}

/// Trains a probe on frozen representations with sigmoid + BCE and Adam,
/// keeping the parameters of the best validation epoch.
pub fn train_probe(
    train: &LabeledSplit,
    valid: &LabeledSplit,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome, EvalError> {
    config.validate()?;
    if train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(EvalError::EmptySplit("valid"));
    }
    let n_tags = train.n_tags();
    let dim = train.reps.features.shape()[1];
    let mut rng = rng_for(seed, &[0]);
    let mut head = ProbeHead::new(config.head, dim, n_tags, config.hidden, &mut rng);
    let adam_config = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &head.parameters());
    let labels = train.fragment_labels();
    let mut order: Vec<usize> = (0..train.reps.features.shape()[0]).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_head = head.clone();
    let mut epochs_run = 0;

    for epoch in 0..config.max_epochs {
        let mut rng = rng_for(seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = gather(&train.reps.features, batch);
            let y: Vec<f32> = batch.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let y = Tensor::new(vec![batch.len(), n_tags], y)?;
            let mut tape = Tape::new();
            let vars = head.register(&mut tape);
            let h = tape.constant(x);
            let logits = head.forward(&mut tape, &vars, h)?;
            let loss = tape.bce_with_logits(logits, &y)?;
            tape.backward(loss)?;
            let grads: Vec<_> = vars.iter().flat_map(|v| [tape.grad(v.weight), tape.grad(v.bias)]).collect();
            adam.step(&mut head.parameters_mut(), &grads);
        }
        epochs_run = epoch + 1;
        let score = validation_score(&head, valid)?;
        let (improved, stop) = stopper.update(epoch, score);
        if improved {
            best_head = head.clone();
        }
        if stop {
            break;
        }
    }
    Ok(ProbeOutcome {
        head: best_head,
        epochs_run,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_validation: stopper.best(),
    })
}
