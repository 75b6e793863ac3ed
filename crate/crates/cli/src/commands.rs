//! One function per subcommand. Each is a thin wrapper over a library entry
//! point: resolve config, verify upstream digests, call the module, write
//! artifacts plus a manifest.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use survtopics::corpus::{
    build_vocabulary, encode_counts, load_feature_specs, split_n, synth_generate,
    synth_vocabulary, RawTable, SplitIndex, SurvivalCorpus, SynthConfig, Vocabulary,
};
use survtopics::eval::bootstrap_ci;
use survtopics::interpret::{build_report, render_heatmap, report_csv, top_words};
use survtopics::survival::curves_to_csv;
use survtopics::trainer::{
    cross_validate, fit_two_stage, predict_curves, train, TrainConfig, TrainError,
};
use survtopics::checkpoint::ModelCheckpoint;

use crate::manifest::{atomic_write, upstream_corpus_manifest, RunManifest};
use crate::{
    CliError, CvArgs, EvaluateArgs, IngestArgs, InterpretArgs, SynthArgs, TrainArgs, TrainFlags,
};

fn read_to_string(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingUpstream(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Parses `--config` JSON into the command's config type; missing file flag
/// means all defaults.
fn load_config<T: DeserializeOwned + Default>(path: &Option<std::path::PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn config_hash<T: Serialize>(config: &T) -> String {
    crate::manifest::digest_bytes(
        serde_json::to_string(config)
            .expect("config serializes")
            .as_bytes(),
    )
}

fn ensure_outdir(outdir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(outdir).map_err(|e| CliError::io(outdir, e))
}

fn load_corpus_artifacts(
    outdir: &Path,
) -> Result<(SurvivalCorpus, SplitIndex, RunManifest), CliError> {
    let upstream = upstream_corpus_manifest(outdir)?;
    let corpus_path = outdir.join("corpus.json");
    let split_path = outdir.join("split.json");
    upstream.verify_artifact(&corpus_path)?;
    upstream.verify_artifact(&split_path)?;
    let corpus = SurvivalCorpus::from_json(&read_to_string(&corpus_path)?)?;
    let split = SplitIndex::from_json(&read_to_string(&split_path)?)?;
    Ok((corpus, split, upstream))
}

// ---------------------------------------------------------------- synth --

fn default_n() -> usize {
    500
}
fn default_d() -> usize {
    30
}
fn default_k() -> usize {
    3
}
fn default_doc_length() -> usize {
    40
}
fn default_censor_rate() -> f64 {
    0.3
}
fn default_alpha() -> f64 {
    1.0
}
fn default_b_scale() -> f64 {
    2.5
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_folds() -> usize {
    5
}

/// Synthetic-data command config; planted topics are block-structured
/// (topic g boosts words u with u mod k == g by `b_scale`) and hazard
/// coefficients default to an even spread from +2 to −2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCmdConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_doc_length")]
    pub doc_length: usize,
    #[serde(default = "default_censor_rate")]
    pub censor_rate: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_b_scale")]
    pub b_scale: f64,
    #[serde(default)]
    pub beta_star: Option<Vec<f64>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn even_spread(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k)
        .map(|g| 2.0 - 4.0 * g as f64 / (k - 1) as f64)
        .collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: SynthCmdConfig = load_config(&args.common.config)?;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(v) = args.doc_length {
        cfg.doc_length = v;
    }
    if let Some(v) = args.censor_rate {
        cfg.censor_rate = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.b_scale {
        cfg.b_scale = v;
    }
    if let Some(v) = &args.beta_star {
        let parsed: Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse()).collect();
        cfg.beta_star =
            Some(parsed.map_err(|e| CliError::BadArgs(format!("--beta-star `{v}`: {e}")))?);
    }
    if let Some(v) = args.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }

    let beta_star = cfg.beta_star.clone().unwrap_or_else(|| even_spread(cfg.k));
    if beta_star.len() != cfg.k {
        return Err(CliError::BadArgs(format!(
            "beta-star has {} entries for k={}",
            beta_star.len(),
            cfg.k
        )));
    }
    let synth_cfg = SynthConfig {
        n: cfg.n,
        d: cfg.d,
        k: cfg.k,
        alpha: cfg.alpha,
        gamma_star: vec![0.0; cfg.d],
        b_star: (0..cfg.k)
            .map(|g| {
                (0..cfg.d)
                    .map(|u| if u % cfg.k == g { cfg.b_scale } else { 0.0 })
                    .collect()
            })
            .collect(),
        beta_star,
        doc_length: cfg.doc_length,
        censor_rate: cfg.censor_rate,
        seed: cfg.seed,
    };
    let (corpus, truth) = synth_generate(&synth_cfg)?;
    let vocab = synth_vocabulary(cfg.d);
    let split = split_n(cfg.n, cfg.test_fraction, cfg.folds, cfg.seed)?;

    ensure_outdir(&args.common.outdir)?;
    let out = &args.common.outdir;
    let mut manifest = RunManifest::new("synth", cfg.seed, config_hash(&cfg));
    for (name, content) in [
        ("vocab.json", vocab.to_json()),
        ("corpus.json", corpus.to_json()),
        ("split.json", split.to_json()),
        (
            "truth.json",
            serde_json::to_string_pretty(&truth).expect("truth serializes"),
        ),
    ] {
        let path = out.join(name);
        atomic_write(&path, content)?;
        manifest.record_artifact(&path)?;
    }
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;
    println!(
        "synth: n={} d={} k={} events={} -> {}",
        corpus.n,
        corpus.d,
        cfg.k,
        corpus.n_events(),
        out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- ingest --

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestCmdConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for IngestCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: IngestCmdConfig = load_config(&args.common.config)?;
    if let Some(v) = args.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }

    let table = RawTable::from_csv_path(&args.csv)?;
    let specs = load_feature_specs(&read_to_string(&args.specs)?)?;

    // Split over subjects first so bin edges come from training rows only.
    let mut subjects: Vec<String> = Vec::new();
    for id in &table.ids {
        if !subjects.contains(id) {
            subjects.push(id.clone());
        }
    }
    let split = split_n(subjects.len(), cfg.test_fraction, cfg.folds, cfg.seed)?;
    let train_ids: std::collections::HashSet<&String> =
        split.train_idx.iter().map(|&i| &subjects[i]).collect();
    let train_rows: Vec<usize> = (0..table.n_rows())
        .filter(|&r| train_ids.contains(&table.ids[r]))
        .collect();
    let vocab = build_vocabulary(&table.subset(&train_rows), &specs)?;
    let corpus = encode_counts(&table, &vocab)?;

    ensure_outdir(&args.common.outdir)?;
    let out = &args.common.outdir;
    let mut manifest = RunManifest::new("ingest", cfg.seed, config_hash(&cfg));
    manifest.record_input(&args.csv)?;
    manifest.record_input(&args.specs)?;
    for (name, content) in [
        ("vocab.json", vocab.to_json()),
        ("corpus.json", corpus.to_json()),
        ("split.json", split.to_json()),
    ] {
        let path = out.join(name);
        atomic_write(&path, content)?;
        manifest.record_artifact(&path)?;
    }
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;
    println!(
        "ingest: {} subjects, {} words, {} train / {} test -> {}",
        corpus.n,
        vocab.size(),
        split.train_idx.len(),
        split.test_idx.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train --

fn apply_train_flags(cfg: &mut TrainConfig, flags: &TrainFlags, seed: Option<u64>) {
    if let Some(v) = flags.k {
        cfg.k = v;
    }
    if let Some(v) = flags.eta {
        cfg.eta = v;
    }
    if let Some(v) = flags.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = flags.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.l1_b {
        cfg.l1_b = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: TrainConfig = load_config(&args.common.config)?;
    apply_train_flags(&mut cfg, &args.flags, args.common.seed);

    let out = &args.common.outdir;
    let (corpus, split, _upstream) = load_corpus_artifacts(out)?;
    let train_corpus = corpus.select(&split.train_idx);

    let command = if args.two_stage {
        "train --two-stage"
    } else {
        "train"
    };
    let (ckpt, log) = if args.two_stage {
        fit_two_stage(&train_corpus, &cfg)?
    } else {
        train(&train_corpus, &cfg)?
    };

    let mut manifest = RunManifest::new(command, cfg.seed, config_hash(&cfg));
    manifest.record_input(&out.join("corpus.json"))?;
    manifest.record_input(&out.join("split.json"))?;
    let model_path = out.join("model.json");
    ckpt.save(&model_path)?;
    manifest.record_artifact(&model_path)?;
    let log_path = out.join("training_log.csv");
    atomic_write(&log_path, log.to_csv())?;
    manifest.record_artifact(&log_path)?;
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;

    let last = log.records.last().expect("at least one epoch");
    println!(
        "train: k={} eta={} epochs={} final elbo={:.4} cox={:.4} -> {}",
        cfg.k,
        cfg.eta,
        cfg.epochs,
        last.elbo,
        last.cox,
        model_path.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- cv --

fn parse_grid(text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    text.split(',')
        .map(|pair| {
            let (k, eta) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::BadArgs(format!("grid entry `{pair}` is not k:eta")))?;
            Ok((
                k.trim()
                    .parse()
                    .map_err(|e| CliError::BadArgs(format!("grid k `{k}`: {e}")))?,
                eta.trim()
                    .parse()
                    .map_err(|e| CliError::BadArgs(format!("grid eta `{eta}`: {e}")))?,
            ))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CvOutput<'a> {
    grid: &'a [(usize, f64)],
    scores: &'a [f64],
    chosen_best: usize,
    chosen_few: usize,
    select_rule: &'a str,
    selected: usize,
}

pub fn cmd_cv(args: &CvArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: TrainConfig = load_config(&args.common.config)?;
    apply_train_flags(&mut cfg, &args.flags, args.common.seed);

    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => TrainConfig::default_grid(),
    };
    if !matches!(args.select.as_str(), "best" | "few") {
        return Err(CliError::BadArgs(format!(
            "--select must be `best` or `few`, got `{}`",
            args.select
        )));
    }

    let out = &args.common.outdir;
    let (corpus, split, _upstream) = load_corpus_artifacts(out)?;
    let train_corpus = corpus.select(&split.train_idx);
    let result = cross_validate(&train_corpus, &grid, args.folds, &cfg)?;
    let selected = if args.select == "few" {
        result.chosen_few
    } else {
        result.chosen_best
    };

    let output = CvOutput {
        grid: &result.grid,
        scores: &result.scores,
        chosen_best: result.chosen_best,
        chosen_few: result.chosen_few,
        select_rule: &args.select,
        selected,
    };
    let json = serde_json::to_string_pretty(&output).expect("cv output serializes");

    let mut manifest = RunManifest::new("cv", cfg.seed, config_hash(&cfg));
    manifest.record_input(&out.join("corpus.json"))?;
    manifest.record_input(&out.join("split.json"))?;
    let cv_path = out.join("cv.json");
    atomic_write(&cv_path, &json)?;
    manifest.record_artifact(&cv_path)?;
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;

    println!("{json}");
    let (k, eta) = result.grid[selected];
    println!(
        "selected: k={k} eta={eta} (rule={}, score={})",
        args.select, result.scores[selected]
    );
    Ok(())
}

// ------------------------------------------------------------- evaluate --

fn default_n_boot() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCmdConfig {
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: EvalCmdConfig = load_config(&args.common.config)?;
    if let Some(v) = args.n_boot {
        cfg.n_boot = v;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }

    let out = &args.common.outdir;
    let (corpus, split, _upstream) = load_corpus_artifacts(out)?;
    let model_path = out.join("model.json");
    RunManifest::load(&RunManifest::path_for(out, "train"))?.verify_artifact(&model_path)?;
    let ckpt = ModelCheckpoint::load(&model_path)?;

    let test_corpus = corpus.select(&split.test_idx);
    let curves = match predict_curves(&ckpt, &test_corpus) {
        Err(TrainError::VocabMismatch { corpus, model }) => {
            return Err(CliError::Stale {
                what: "model.json vocabulary".to_string(),
                expected: corpus,
                actual: model,
            })
        }
        other => other?,
    };
    let result = bootstrap_ci(
        &curves,
        &test_corpus.times,
        &test_corpus.events,
        cfg.n_boot,
        cfg.seed,
    )?;

    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    let mut entries = vec![("baseline".to_string(), &ckpt.baseline)];
    entries.extend(
        test_corpus
            .subject_ids
            .iter()
            .cloned()
            .zip(curves.iter())
            .map(|(id, c)| (id, c)),
    );
    let curves_csv = curves_to_csv(&entries);

    let mut manifest = RunManifest::new("evaluate", cfg.seed, config_hash(&cfg));
    manifest.record_input(&out.join("corpus.json"))?;
    manifest.record_input(&out.join("split.json"))?;
    manifest.record_input(&model_path)?;
    for (name, content) in [("eval.json", json.clone()), ("curves.csv", curves_csv)] {
        let path = out.join(name);
        atomic_write(&path, content)?;
        manifest.record_artifact(&path)?;
    }
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;

    println!("{json}");
    println!("Ctd={} ({}, {})", result.point, result.ci_low, result.ci_high);
    Ok(())
}

// ------------------------------------------------------------ interpret --

fn default_top_words() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretCmdConfig {
    #[serde(default = "default_top_words")]
    pub top_words: usize,
}

impl Default for InterpretCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub fn cmd_interpret(args: &InterpretArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut cfg: InterpretCmdConfig = load_config(&args.common.config)?;
    if let Some(v) = args.top_words {
        cfg.top_words = v;
    }

    let out = &args.common.outdir;
    let vocab_path = out.join("vocab.json");
    upstream_corpus_manifest(out)?.verify_artifact(&vocab_path)?;
    let model_path = out.join("model.json");
    RunManifest::load(&RunManifest::path_for(out, "train"))?.verify_artifact(&model_path)?;

    let vocab = Vocabulary::from_json(&read_to_string(&vocab_path)?)?;
    let ckpt = ModelCheckpoint::load(&model_path)?;
    let report = match build_report(&ckpt, &vocab) {
        Err(survtopics::interpret::InterpretError::StaleVocabulary { vocab, model }) => {
            return Err(CliError::Stale {
                what: "vocab.json".to_string(),
                expected: model,
                actual: vocab,
            })
        }
        other => other?,
    };

    let mut manifest = RunManifest::new("interpret", ckpt.config.seed, config_hash(&cfg));
    manifest.record_input(&vocab_path)?;
    manifest.record_input(&model_path)?;
    for (name, content) in [
        ("report.csv", report_csv(&report)),
        ("heatmap.svg", render_heatmap(&report)),
        ("top_words.txt", top_words(&report, cfg.top_words)),
    ] {
        let path = out.join(name);
        atomic_write(&path, content)?;
        manifest.record_artifact(&path)?;
    }
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.save(out)?;

    println!(
        "interpret: {} words x {} topics, anti-survival topic {} (beta {:.3}) -> {}",
        report.d(),
        report.k(),
        report.anti_topic + 1,
        report.betas[report.anti_topic],
        out.display()
    );
    Ok(())
}
