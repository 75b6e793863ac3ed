//! Cox proportional-hazards machinery: the partial-likelihood loss with the
//! Breslow tie convention, the Breslow baseline survival estimator,
//! per-subject curve prediction, and a gradient-descent Cox fit over raw
//! feature matrices.
//!
//! A subject's risk score is `Xi_i = beta . w_i`; the risk set at a death
//! time holds every subject whose observed time is `>=` it, tied subjects
//! included.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{Graph, GradError, NodeId, ScaleFactor, Tensor};

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("empty input")]
    Empty,
    #[error("lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("no events; baseline hazard is undefined")]
    NoEvents,
    #[error("times must be positive and ascending: {0}")]
    BadTimes(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("graph: {0}")]
    Grad(#[from] GradError),
}

/// Linear hazard head: `Xi = beta . w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxHead {
    pub beta: Vec<f64>,
}

impl CoxHead {
    pub fn score(&self, w: &[f64]) -> f64 {
        self.beta.iter().zip(w).map(|(b, x)| b * x).sum()
    }
}

/// A step survival function on the unique training death times. Between grid
/// points the curve is a right-continuous step; before the first death time
/// it is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub hazards: Vec<f64>,
    pub baseline_surv: Vec<f64>,
}

impl SurvivalCurve {
    /// Builds the curve from per-death-time hazard increments; survival
    /// values are `exp(-cumsum(hazards))` by construction.
    pub fn from_hazards(times: Vec<f64>, hazards: Vec<f64>) -> Result<Self, SurvivalError> {
        if times.is_empty() {
            return Err(SurvivalError::Empty);
        }
        if times.len() != hazards.len() {
            return Err(SurvivalError::LengthMismatch(format!(
                "{} times vs {} hazards",
                times.len(),
                hazards.len()
            )));
        }
        if times[0] <= 0.0 || !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(SurvivalError::BadTimes(format!("{times:?}")));
        }
        if let Some(i) = hazards.iter().position(|h| !h.is_finite() || *h < 0.0) {
            return Err(SurvivalError::NonFinite {
                what: "hazard",
                index: i,
            });
        }
        let mut cum = 0.0;
        let baseline_surv = hazards
            .iter()
            .map(|h| {
                cum += h;
                (-cum).exp()
            })
            .collect();
        Ok(Self {
            times,
            hazards,
            baseline_surv,
        })
    }

    /// Survival probability at `t` (right-continuous step; 1 before the
    /// first death time).
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&ti| ti <= t);
        if idx == 0 {
            1.0
        } else {
            self.baseline_surv[idx - 1]
        }
    }
}

fn check_inputs(xi: &[f64], times: &[f64], events: &[u8]) -> Result<(), SurvivalError> {
    if xi.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if xi.len() != times.len() || xi.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(format!(
            "{} scores, {} times, {} events",
            xi.len(),
            times.len(),
            events.len()
        )));
    }
    if let Some(i) = xi.iter().position(|v| !v.is_finite()) {
        return Err(SurvivalError::NonFinite {
            what: "risk score",
            index: i,
        });
    }
    if let Some(i) = times.iter().position(|t| !t.is_finite() || *t <= 0.0) {
        return Err(SurvivalError::NonFinite {
            what: "time",
            index: i,
        });
    }
    Ok(())
}

/// Indices sorted by time descending; tied times grouped adjacently.
fn descending_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    order
}

/// Streaming log-sum-exp accumulator (max plus scaled sum).
struct RunningLse {
    max: f64,
    sum: f64,
}

impl RunningLse {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        if self.sum == 0.0 {
            self.max = x;
            self.sum = 1.0;
        } else if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Negative Cox log partial likelihood with Breslow ties:
/// `sum over events i of (-Xi_i + log sum over {j: Y_j >= Y_i} exp(Xi_j))`.
/// All-censored input gives 0. One pass over a descending time sort; tied
/// subjects enter the risk set before any of their event terms are taken.
pub fn cox_loss(xi: &[f64], times: &[f64], events: &[u8]) -> Result<f64, SurvivalError> {
    check_inputs(xi, times, events)?;
    let order = descending_order(times);
    let mut lse = RunningLse::new();
    let mut loss = 0.0;
    let mut pos = 0;
    while pos < order.len() {
        let t = times[order[pos]];
        let mut end = pos;
        while end < order.len() && times[order[end]] == t {
            lse.add(xi[order[end]]);
            end += 1;
        }
        for &i in &order[pos..end] {
            if events[i] == 1 {
                loss += lse.value() - xi[i];
            }
        }
        pos = end;
    }
    Ok(loss)
}

/// Breslow baseline: per unique death time `t_i` with `d_i` deaths,
/// `h_i = d_i / sum over {j: Y_j >= t_i} exp(Xi_j)`, and
/// `S0(t) = exp(-sum of h_i for t_i <= t)`. Scores are max-shifted so the
/// denominators cannot overflow.
pub fn breslow(
    xi: &[f64],
    times: &[f64],
    events: &[u8],
) -> Result<SurvivalCurve, SurvivalError> {
    check_inputs(xi, times, events)?;
    if !events.iter().any(|&e| e == 1) {
        return Err(SurvivalError::NoEvents);
    }
    let shift = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let order = descending_order(times);

    // Walk descending, so the running sum at a death time is exactly its
    // risk-set mass; emit (time, d, denom) per unique event time.
    let mut denom = 0.0;
    let mut entries: Vec<(f64, f64, f64)> = Vec::new();
    let mut pos = 0;
    while pos < order.len() {
        let t = times[order[pos]];
        let mut end = pos;
        let mut deaths = 0u64;
        while end < order.len() && times[order[end]] == t {
            denom += (xi[order[end]] - shift).exp();
            deaths += u64::from(events[order[end]] == 1);
            end += 1;
        }
        if deaths > 0 {
            entries.push((t, deaths as f64, denom));
        }
        pos = end;
    }
    entries.reverse();

    let times_out: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let hazards: Vec<f64> = entries
        .iter()
        .map(|&(_, d, s)| d * (-shift).exp() / s)
        .collect();
    SurvivalCurve::from_hazards(times_out, hazards)
}

/// Subject-specific curve: `S(t | w) = S0(t) ^ exp(beta . w)`, realized by
/// scaling every hazard increment by `exp(beta . w)`.
pub fn predict_survival(w: &[f64], head: &CoxHead, base: &SurvivalCurve) -> SurvivalCurve {
    let scale = head.score(w).exp();
    let hazards: Vec<f64> = base.hazards.iter().map(|h| h * scale).collect();
    SurvivalCurve::from_hazards(base.times.clone(), hazards)
        .expect("scaled curve keeps a valid grid")
}

/// Curves as CSV rows `(subject_id, t, S)`, baseline first when present.
pub fn curves_to_csv(entries: &[(String, &SurvivalCurve)]) -> String {
    let mut out = String::from("subject_id,t,S\n");
    for (id, curve) in entries {
        for (t, s) in curve.times.iter().zip(&curve.baseline_surv) {
            out.push_str(&format!("{id},{t},{s}\n"));
        }
    }
    out
}

/// Column-wise standardization to zero mean and unit variance (population
/// variance); constant columns are centered and left at scale 1.
pub fn standardize(features: &[f64], n: usize, p: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(features.len(), n * p, "feature matrix shape");
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let mut s = 0.0;
        for i in 0..n {
            s += features[i * p + j];
        }
        means[j] = s / n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let d = features[i * p + j] - means[j];
            v += d * d;
        }
        let sd = (v / n as f64).sqrt();
        sds[j] = if sd > 0.0 { sd } else { 1.0 };
    }
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            out[i * p + j] = (features[i * p + j] - means[j]) / sds[j];
        }
    }
    (out, means, sds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCoxConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for RawCoxConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 5000,
            l2: 0.0,
        }
    }
}

/// Per-score gradient of the Breslow partial likelihood:
/// `dL/dXi_j = -delta_j + exp(Xi_j) * sum over death times t <= Y_j of d_t / S_t`.
fn cox_loss_grad_xi(xi: &[f64], times: &[f64], events: &[u8]) -> Vec<f64> {
    let n = xi.len();
    let shift = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let order = descending_order(times);

    // (time, d_t / S_t) per unique event time, ascending.
    let mut denom = 0.0;
    let mut terms: Vec<(f64, f64)> = Vec::new();
    let mut pos = 0;
    while pos < order.len() {
        let t = times[order[pos]];
        let mut end = pos;
        let mut deaths = 0.0;
        while end < order.len() && times[order[end]] == t {
            denom += (xi[order[end]] - shift).exp();
            deaths += f64::from(events[order[end]] == 1);
            end += 1;
        }
        if deaths > 0.0 {
            terms.push((t, deaths / denom));
        }
        pos = end;
    }
    terms.reverse();
    let mut prefix = vec![0.0; terms.len() + 1];
    for (i, &(_, v)) in terms.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }

    (0..n)
        .map(|j| {
            let idx = terms.partition_point(|&(t, _)| t <= times[j]);
            -f64::from(events[j] == 1) + (xi[j] - shift).exp() * prefix[idx]
        })
        .collect()
}

/// Full-batch gradient descent on `cox_loss + l2/2 * |beta|^2` over a raw
/// `n x p` feature matrix (row-major). Converges when the loss improves by
/// less than 1e-9 for 10 consecutive epochs; a non-finite loss aborts with
/// the offending epoch.
pub fn fit_cox_raw(
    features: &[f64],
    p: usize,
    times: &[f64],
    events: &[u8],
    config: &RawCoxConfig,
) -> Result<CoxHead, SurvivalError> {
    if times.is_empty() || p == 0 {
        return Err(SurvivalError::Empty);
    }
    let n = times.len();
    if features.len() != n * p || events.len() != n {
        return Err(SurvivalError::LengthMismatch(format!(
            "{} feature values for n={n}, p={p}",
            features.len()
        )));
    }
    let mut beta = vec![0.0; p];
    let loss_at = |beta: &[f64]| -> Result<f64, SurvivalError> {
        let xi: Vec<f64> = (0..n)
            .map(|i| {
                (0..p)
                    .map(|j| beta[j] * features[i * p + j])
                    .sum::<f64>()
            })
            .collect();
        let ridge = 0.5 * config.l2 * beta.iter().map(|b| b * b).sum::<f64>();
        Ok(cox_loss(&xi, times, events)? + ridge)
    };

    let mut prev = loss_at(&beta)?;
    let mut calm = 0usize;
    for epoch in 0..config.epochs {
        let xi: Vec<f64> = (0..n)
            .map(|i| {
                (0..p)
                    .map(|j| beta[j] * features[i * p + j])
                    .sum::<f64>()
            })
            .collect();
        let dxi = cox_loss_grad_xi(&xi, times, events);
        for j in 0..p {
            let mut g = config.l2 * beta[j];
            for i in 0..n {
                g += dxi[i] * features[i * p + j];
            }
            beta[j] -= config.lr * g;
        }
        let loss = loss_at(&beta)?;
        if !loss.is_finite() {
            return Err(SurvivalError::Diverged { epoch });
        }
        if prev - loss < 1e-9 {
            calm += 1;
            if calm >= 10 {
                break;
            }
        } else {
            calm = 0;
        }
        prev = loss;
    }
    Ok(CoxHead { beta })
}

/// Appends the Cox loss over a batch to a graph: risk sets become a 0/1 mask
/// over the masked log-sum-exp, and event terms are gathered and summed. A
/// batch with no events yields a constant-zero node.
pub fn append_cox_loss(
    g: &mut Graph,
    xi: NodeId,
    times: &[f64],
    events: &[u8],
) -> Result<NodeId, GradError> {
    let n = times.len();
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = f64::from(times[j] >= times[i]);
        }
    }
    let lse = g.logsumexp_masked(xi, Tensor::new(vec![n, n], mask).expect("mask shape"))?;
    let neg_xi = g.scale(xi, ScaleFactor::Uniform(-1.0))?;
    let diff = g.add(lse, neg_xi)?;
    let event_rows: Vec<usize> = (0..n).filter(|&i| events[i] == 1).collect();
    let picked = g.gather_rows(diff, event_rows)?;
    Ok(g.sum(picked))
}

/// Evaluates the graph-built Cox loss for a given score vector (used by
/// tests to pin the graph path to the direct implementation).
pub fn cox_loss_via_graph(
    xi: &[f64],
    times: &[f64],
    events: &[u8],
) -> Result<f64, SurvivalError> {
    let mut g = Graph::new();
    let var = g.var("xi", &[xi.len()]);
    let loss = append_cox_loss(&mut g, var, times, events)?;
    g.set_output(loss);
    let mut bindings = BTreeMap::new();
    bindings.insert(
        "xi".to_string(),
        Tensor::new(vec![xi.len()], xi.to_vec()).expect("xi tensor"),
    );
    let out = g.forward(&bindings)?;
    Ok(out.scalar_value())
}
