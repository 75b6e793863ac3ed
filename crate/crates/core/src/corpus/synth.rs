//! Synthetic corpora with known topics, hazard coefficients, and membership
//! vectors, used for recovery experiments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, SurvivalCorpus, Vocabulary};
use crate::grad::softmax_in_place;

/// Baseline hazard rate for event-time draws; the hazard for subject `i`
/// is `exp(beta_star . w_i)` times this.
const BASE_RATE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// Pseudo-count of the symmetric Dirichlet the membership prior mimics.
    pub alpha: f64,
    /// Background log-frequencies, length `d`.
    pub gamma_star: Vec<f64>,
    /// Topic deviations, `k` rows of length `d`.
    pub b_star: Vec<Vec<f64>>,
    /// Hazard coefficients, length `k`.
    pub beta_star: Vec<f64>,
    /// Words drawn per subject.
    pub doc_length: usize,
    /// Target fraction of censored subjects; 0 disables censoring.
    pub censor_rate: f64,
    pub seed: u64,
}

/// What the generator knows and the model has to recover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Membership vectors, `n` rows of length `k`, each on the simplex.
    pub w_star: Vec<Vec<f64>>,
    /// argmax of each membership vector.
    pub dominant_topic: Vec<usize>,
    /// Realized censored fraction.
    pub censored_fraction: f64,
}

impl SynthConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.n == 0 || self.d == 0 || self.k == 0 || self.doc_length == 0 {
            return Err(CorpusError::BadConfig(
                "n, d, k, doc_length must be positive".to_string(),
            ));
        }
        if self.alpha <= 0.0 {
            return Err(CorpusError::BadConfig("alpha must be positive".to_string()));
        }
        if self.gamma_star.len() != self.d {
            return Err(CorpusError::BadConfig(format!(
                "gamma_star has length {}, want d={}",
                self.gamma_star.len(),
                self.d
            )));
        }
        if self.b_star.len() != self.k || self.b_star.iter().any(|r| r.len() != self.d) {
            return Err(CorpusError::BadConfig(format!(
                "b_star must be {}x{}",
                self.k, self.d
            )));
        }
        if self.beta_star.len() != self.k {
            return Err(CorpusError::BadConfig(format!(
                "beta_star has length {}, want k={}",
                self.beta_star.len(),
                self.k
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(CorpusError::BadConfig(format!(
                "censor_rate {} not in [0, 1)",
                self.censor_rate
            )));
        }
        Ok(())
    }
}

/// One synthetic word per dictionary slot; slot `u` is its own single-bin
/// feature `w{u}`.
pub fn synth_vocabulary(d: usize) -> Vocabulary {
    let width = (d.max(2) - 1).to_string().len();
    let words = (0..d).map(|u| format!("w{u:0width$}:1")).collect();
    Vocabulary::new(words, Default::default()).expect("synthetic vocabulary is valid")
}

/// Draws a corpus from the generative story: logistic-normal memberships,
/// multinomial word counts from `softmax(gamma_star + w . b_star)`, and
/// exponential event times with hazard `exp(beta_star . w)`. Censoring times
/// are uniform on `[0, q]` with `q` calibrated by bisection so the censored
/// fraction lands within 0.05 of `censor_rate`.
pub fn synth_generate(
    config: &SynthConfig,
) -> Result<(SurvivalCorpus, SynthTruth), CorpusError> {
    config.validate()?;
    let (n, d, k) = (config.n, config.d, config.k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Matches the model prior: diag((k - 1) / (alpha k)); one topic is a
    // point mass.
    let sigma0 = if k > 1 {
        ((k - 1) as f64 / (config.alpha * k as f64)).sqrt()
    } else {
        0.0
    };
    let normal = Normal::new(0.0, sigma0.max(f64::MIN_POSITIVE)).expect("valid normal");

    let mut w_star = Vec::with_capacity(n);
    let mut dominant = Vec::with_capacity(n);
    let mut counts = vec![0u32; n * d];
    let mut event_times = Vec::with_capacity(n);

    for i in 0..n {
        let mut w: Vec<f64> = if k > 1 {
            (0..k).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0]
        };
        softmax_in_place(&mut w);
        let argmax = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(t, _)| t)
            .unwrap_or(0);

        let mut probs: Vec<f64> = (0..d)
            .map(|u| {
                config.gamma_star[u]
                    + (0..k).map(|t| w[t] * config.b_star[t][u]).sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut probs);
        // Cumulative distribution for inverse-CDF multinomial draws.
        let mut cdf = probs;
        for u in 1..d {
            cdf[u] += cdf[u - 1];
        }
        for _ in 0..config.doc_length {
            let r: f64 = rng.random();
            let u = cdf.partition_point(|&c| c < r).min(d - 1);
            counts[i * d + u] += 1;
        }

        let rate = BASE_RATE
            * (0..k)
                .map(|t| config.beta_star[t] * w[t])
                .sum::<f64>()
                .exp();
        let t: f64 = Exp::new(rate)
            .map_err(|_| CorpusError::BadConfig(format!("non-finite hazard rate {rate}")))?
            .sample(&mut rng);
        event_times.push(t.max(f64::MIN_POSITIVE));
        w_star.push(w);
        dominant.push(argmax);
    }

    let mut times = event_times.clone();
    let mut events = vec![1u8; n];
    let mut censored_fraction = 0.0;
    if config.censor_rate > 0.0 {
        // One uniform draw per subject, shared across candidate scales so the
        // censored fraction is monotone in q and bisection is well-defined.
        let unit: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
        let frac_at = |q: f64| -> f64 {
            let censored = (0..n)
                .filter(|&i| q * unit[i] < event_times[i])
                .count();
            censored as f64 / n as f64
        };
        let mut lo = 0.0_f64;
        let mut hi = event_times.iter().cloned().fold(1.0_f64, f64::max) * 2.0;
        let mut guard = 0;
        while frac_at(hi) > config.censor_rate && guard < 200 {
            hi *= 2.0;
            guard += 1;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if frac_at(mid) > config.censor_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = if (frac_at(lo) - config.censor_rate).abs()
            < (frac_at(hi) - config.censor_rate).abs()
        {
            lo
        } else {
            hi
        };
        for i in 0..n {
            let c = (q * unit[i]).max(f64::MIN_POSITIVE);
            if c < event_times[i] {
                times[i] = c;
                events[i] = 0;
            }
        }
        censored_fraction = events.iter().filter(|&&e| e == 0).count() as f64 / n as f64;
    }

    let vocab = synth_vocabulary(d);
    let ids = (0..n).map(|i| format!("synth-{i:06}")).collect();
    let corpus = SurvivalCorpus::from_parts(counts, times, events, ids, d, vocab.hash())?;
    Ok((
        corpus,
        SynthTruth {
            w_star,
            dominant_topic: dominant,
            censored_fraction,
        },
    ))
}
