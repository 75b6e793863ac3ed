//! Joint optimization of the topic model and the hazard head, plus
//! cross-validation, the "best" and "few" selection rules, and the two-stage
//! (unsupervised topics, then Cox) baseline.
//!
//! Everything is seeded: the same corpus and config produce bit-identical
//! checkpoints. Minibatch risk sets are within-batch.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::corpus::{fold_assignments, normalize_counts, CorpusError, SurvivalCorpus};
use crate::eval::{ctd_index, EvalError};
use crate::grad::{GradError, Graph, ScaleFactor, Tensor};
use crate::survival::{
    append_cox_loss, breslow, cox_loss, fit_cox_raw, predict_survival, CoxHead, RawCoxConfig,
    SurvivalCurve, SurvivalError,
};
use crate::topic::{
    append_elbo, elbo_loss, encode, names, posterior_mean_weights, sample_topics, DecoderParams,
    EncoderParams, PriorSpec, TopicError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("training corpus has no events")]
    NoEvents,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("every cross-validation fold was unusable")]
    AllFoldsDegenerate,
    #[error("corpus/model dictionary mismatch: {corpus} vs {model}")]
    VocabMismatch { corpus: String, model: String },
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Topic(#[from] TopicError),
    #[error("graph: {0}")]
    Grad(#[from] GradError),
    #[error("{0}")]
    Survival(#[from] SurvivalError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
}

fn default_k() -> usize {
    3
}
fn default_eta() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_hidden() -> usize {
    100
}
fn default_lr() -> f64 {
    2e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    200
}
fn default_adam() -> (f64, f64, f64) {
    (0.9, 0.999, 1e-8)
}

/// Training configuration; JSON config files mirror this struct field for
/// field, and every field has a default so partial files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Weight on the survival term; it multiplies the per-batch Cox sum.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// L1 penalty on the deviation matrix; 0 disables it.
    #[serde(default)]
    pub l1_b: f64,
    #[serde(default = "default_adam")]
    pub adam: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            eta: default_eta(),
            alpha: default_alpha(),
            hidden: default_hidden(),
            lr: default_lr(),
            batch: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            l1_b: 0.0,
            adam: default_adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.k == 0 {
            return bad("k must be >= 1".to_string());
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta {} must be >= 0", self.eta));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".to_string());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        // A risk set of one subject carries no ordering signal.
        if self.batch < 2 {
            return bad("batch must be >= 2".to_string());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".to_string());
        }
        if !(self.l1_b >= 0.0) {
            return bad(format!("l1_b {} must be >= 0", self.l1_b));
        }
        let (b1, b2, e) = self.adam;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(e > 0.0) {
            return bad(format!("adam parameters ({b1}, {b2}, {e}) out of range"));
        }
        Ok(())
    }

    /// The default hyperparameter grid the cross-validation command sweeps.
    pub fn default_grid() -> Vec<(usize, f64)> {
        let ks = [2usize, 3, 5, 10];
        let etas = [0.1, 1.0, 10.0, 100.0];
        ks.iter()
            .flat_map(|&k| etas.iter().map(move |&eta| (k, eta)))
            .collect()
    }
}

/// Adam with bias correction; moment state is keyed by parameter name.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, (beta1, beta2, eps): (f64, f64, f64)) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One epoch row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub cox: f64,
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,elbo,cox,total,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.elbo, r.cox, r.total, r.wall_ms
            ));
        }
        out
    }

    /// CSV without the wall-clock column — the form digests and determinism
    /// comparisons use.
    pub fn stable_csv(&self) -> String {
        let mut out = String::from("epoch,elbo,cox,total\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.elbo, r.cox, r.total));
        }
        out
    }
}

/// The joint objective on one batch, composed from the two audited pure
/// losses: batch-mean topic loss plus `eta` times the batch Cox sum over
/// reparameterized topic weights.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    counts: &[f64],
    times: &[f64],
    events: &[u8],
    enc: &EncoderParams,
    dec: &DecoderParams,
    head: &CoxHead,
    prior: &PriorSpec,
    eta: f64,
    eps: &[f64],
    l1_b: f64,
) -> Result<f64, TrainError> {
    let n = times.len();
    let elbo = elbo_loss(counts, n, enc, dec, prior, eps, l1_b)?;
    if eta == 0.0 {
        return Ok(elbo);
    }
    let (d, _, k) = enc.dims();
    let mut xi = Vec::with_capacity(n);
    for i in 0..n {
        let x = &counts[i * d..(i + 1) * d];
        let v: f64 = x.iter().sum();
        let xbar: Vec<f64> = x.iter().map(|c| c / v).collect();
        let (m, lv) = encode(&xbar, enc)?;
        let post = sample_topics(&m, &lv, &eps[i * k..(i + 1) * k]);
        xi.push(head.score(&post.w));
    }
    if !events.iter().any(|&e| e == 1) {
        log::debug!("batch has no events; Cox term is zero");
    }
    Ok(elbo + eta * cox_loss(&xi, times, events)?)
}

fn empirical_log_frequencies(corpus: &SurvivalCorpus) -> Vec<f64> {
    let mut totals = vec![1.0f64; corpus.d]; // add-one smoothing
    for i in 0..corpus.n {
        for (u, &c) in corpus.row(i).iter().enumerate() {
            totals[u] += f64::from(c);
        }
    }
    let z: f64 = totals.iter().sum();
    totals.into_iter().map(|c| (c / z).ln()).collect()
}

/// Trains the joint model. Parameters get Adam updates from a per-batch
/// graph; batches are drawn from a fresh seeded permutation each epoch and
/// internally sorted by observed time descending so risk sets are contiguous
/// prefixes. The returned checkpoint carries a Breslow baseline computed
/// from full-training-set posterior-mean scores.
pub fn train(
    corpus: &SurvivalCorpus,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainingLog), TrainError> {
    config.validate()?;
    corpus.validate()?;
    if corpus.n_events() == 0 {
        return Err(TrainError::NoEvents);
    }
    let (n, d, k, h) = (corpus.n, corpus.d, config.k, config.hidden);
    let prior = PriorSpec::new(k, config.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let enc = EncoderParams::init_random(d, h, k, &mut rng);
    let dec = DecoderParams::init_random(empirical_log_frequencies(corpus), k, &mut rng);
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    enc.bind_into(&mut params);
    dec.bind_into(&mut params);
    params.insert(names::BETA.to_string(), Tensor::vector(vec![0.0; k]));
    let mut adam = Adam::new(config.lr, config.adam);

    let counts: Vec<f64> = (0..n)
        .flat_map(|i| corpus.row(i).iter().map(|&c| f64::from(c)))
        .collect();

    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        let mut cox_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in perm.chunks(config.batch).enumerate() {
            let mut idx = chunk.to_vec();
            idx.sort_by(|&a, &b| corpus.times[b].total_cmp(&corpus.times[a]).then(a.cmp(&b)));
            let nb = idx.len();
            let bcounts: Vec<f64> = idx
                .iter()
                .flat_map(|&i| counts[i * d..(i + 1) * d].iter().copied())
                .collect();
            let btimes: Vec<f64> = idx.iter().map(|&i| corpus.times[i]).collect();
            let bevents: Vec<u8> = idx.iter().map(|&i| corpus.events[i]).collect();
            let eps: Vec<f64> = (0..nb * k).map(|_| normal.sample(&mut rng)).collect();

            let mut g = Graph::new();
            let elbo_nodes = append_elbo(&mut g, &bcounts, nb, (d, h, k), &prior, &eps, config.l1_b)?;
            let mut probes = vec![elbo_nodes.loss];
            let output = if config.eta > 0.0 {
                if !bevents.iter().any(|&e| e == 1) {
                    log::debug!("epoch {epoch} batch {batch_no}: no events in batch");
                }
                let beta = g.var(names::BETA, &[k]);
                let xi = g.matmul(elbo_nodes.w, beta)?;
                let cox = append_cox_loss(&mut g, xi, &btimes, &bevents)?;
                probes.push(cox);
                let scaled = g.scale(cox, ScaleFactor::Uniform(config.eta))?;
                g.add(elbo_nodes.loss, scaled)?
            } else {
                elbo_nodes.loss
            };
            g.set_output(output);

            let (grads, probed) = g.backward_with_probes(&params, &probes).map_err(|e| match e {
                GradError::NonFinite { .. } => TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                },
                other => TrainError::Grad(other),
            })?;
            adam.step(&mut params, &grads);
            elbo_sum += probed[0].scalar_value();
            if let Some(c) = probed.get(1) {
                cox_sum += c.scalar_value();
            }
            batches += 1;
        }
        let b = batches as f64;
        log.records.push(LogRecord {
            epoch,
            elbo: elbo_sum / b,
            cox: cox_sum / b,
            total: (elbo_sum + config.eta * cox_sum) / b,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }

    let baseline = baseline_from_params(&params, corpus)?;
    let ckpt = ModelCheckpoint {
        prior,
        params,
        baseline,
        vocab_hash: corpus.vocab_hash.clone(),
        config: config.clone(),
    };
    Ok((ckpt, log))
}

fn posterior_scores(
    params: &BTreeMap<String, Tensor>,
    corpus: &SurvivalCorpus,
) -> Result<Vec<f64>, TrainError> {
    let enc = EncoderParams::from_map(params)?;
    let (_, _, k) = enc.dims();
    let xbar = normalize_counts(corpus)?;
    let w = posterior_mean_weights(&xbar, corpus.n, &enc)?;
    let beta = params
        .get(names::BETA)
        .ok_or_else(|| TrainError::BadConfig("missing beta".to_string()))?;
    Ok((0..corpus.n)
        .map(|i| {
            (0..k)
                .map(|t| beta.data()[t] * w[i * k + t])
                .sum::<f64>()
        })
        .collect())
}

fn baseline_from_params(
    params: &BTreeMap<String, Tensor>,
    corpus: &SurvivalCorpus,
) -> Result<SurvivalCurve, TrainError> {
    let xi = posterior_scores(params, corpus)?;
    Ok(breslow(&xi, &corpus.times, &corpus.events)?)
}

/// Posterior-mean survival curves for every subject of `corpus` under a
/// trained model. The corpus must carry the dictionary hash the model was
/// trained with.
pub fn predict_curves(
    ckpt: &ModelCheckpoint,
    corpus: &SurvivalCorpus,
) -> Result<Vec<SurvivalCurve>, TrainError> {
    if ckpt.vocab_hash != corpus.vocab_hash {
        return Err(TrainError::VocabMismatch {
            corpus: corpus.vocab_hash.clone(),
            model: ckpt.vocab_hash.clone(),
        });
    }
    let enc = ckpt.encoder()?;
    let (_, _, k) = enc.dims();
    let xbar = normalize_counts(corpus)?;
    let w = posterior_mean_weights(&xbar, corpus.n, &enc)?;
    let head = ckpt.cox_head()?;
    Ok((0..corpus.n)
        .map(|i| predict_survival(&w[i * k..(i + 1) * k], &head, &ckpt.baseline))
        .collect())
}

/// Cross-validation results over a `(k, eta)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<(usize, f64)>,
    pub scores: Vec<f64>,
    pub chosen_best: usize,
    pub chosen_few: usize,
}

/// Mean validation concordance per grid setting over shared fold
/// assignments. Folds that cannot be trained or scored (no events, no
/// comparable pairs) are skipped with a warning and the mean reweighted;
/// a setting with no usable fold is an error.
pub fn cross_validate(
    corpus: &SurvivalCorpus,
    grid: &[(usize, f64)],
    folds: usize,
    base: &TrainConfig,
) -> Result<CvResult, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::BadConfig("empty grid".to_string()));
    }
    let assignments = fold_assignments(corpus.n, folds, base.seed)?;
    let mut scores = Vec::with_capacity(grid.len());
    for &(k, eta) in grid {
        let mut cfg = base.clone();
        cfg.k = k;
        cfg.eta = eta;
        let mut acc = 0.0;
        let mut used = 0usize;
        for (f, val_idx) in assignments.iter().enumerate() {
            let mut train_idx: Vec<usize> = assignments
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            train_idx.sort_unstable();
            let train_c = corpus.select(&train_idx);
            let val_c = corpus.select(val_idx);
            let fold_score = train(&train_c, &cfg).and_then(|(ckpt, _)| {
                let curves = predict_curves(&ckpt, &val_c)?;
                Ok(ctd_index(&curves, &val_c.times, &val_c.events)?)
            });
            match fold_score {
                Ok(s) => {
                    acc += s;
                    used += 1;
                }
                Err(e) => log::warn!("fold {f} skipped for (k={k}, eta={eta}): {e}"),
            }
        }
        if used == 0 {
            return Err(TrainError::AllFoldsDegenerate);
        }
        scores.push(acc / used as f64);
    }

    let chosen_best = (0..grid.len())
        .max_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(grid[b].0.cmp(&grid[a].0))
                .then(grid[b].1.total_cmp(&grid[a].1))
        })
        .expect("nonempty grid");
    let mut result = CvResult {
        grid: grid.to_vec(),
        scores,
        chosen_best,
        chosen_few: 0,
    };
    result.chosen_few = select_few(&result, 0.005);
    Ok(result)
}

/// The "few" rule: among settings scoring within `slack` of the best, pick
/// the fewest topics; ties on k go to the higher score, then the smaller
/// eta.
pub fn select_few(result: &CvResult, slack: f64) -> usize {
    let best = result
        .scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut choice: Option<usize> = None;
    for (i, (&(k, eta), &s)) in result.grid.iter().zip(&result.scores).enumerate() {
        if s < best - slack {
            continue;
        }
        let wins = match choice {
            None => true,
            Some(j) => {
                let (kj, etaj) = result.grid[j];
                let sj = result.scores[j];
                k < kj || (k == kj && (s > sj || (s == sj && eta < etaj)))
            }
        };
        if wins {
            choice = Some(i);
        }
    }
    choice.expect("scores nonempty")
}

/// Unsupervised topics first (eta forced to 0), then a Cox fit over the
/// frozen posterior-mean weights; the baseline is rebuilt from the fitted
/// scores. Topic parameters are untouched by stage 2.
pub fn fit_two_stage(
    corpus: &SurvivalCorpus,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainingLog), TrainError> {
    let mut stage1 = config.clone();
    stage1.eta = 0.0;
    let (mut ckpt, log) = train(corpus, &stage1)?;

    let enc = ckpt.encoder()?;
    let xbar = normalize_counts(corpus)?;
    let w = posterior_mean_weights(&xbar, corpus.n, &enc)?;
    let head = fit_cox_raw(
        &w,
        config.k,
        &corpus.times,
        &corpus.events,
        &RawCoxConfig {
            lr: 0.05,
            epochs: 5000,
            l2: 1e-4,
        },
    )?;
    ckpt.params
        .insert(names::BETA.to_string(), Tensor::vector(head.beta));
    ckpt.baseline = baseline_from_params(&ckpt.params, corpus)?;
    ckpt.config = config.clone();
    Ok((ckpt, log))
}
