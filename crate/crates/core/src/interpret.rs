//! Topic interpretation artifacts: exponentiated word log-deviations as
//! multiplicative ratios against the background, hazard coefficients per
//! topic, heatmap row ordering, and the rendered SVG/CSV/text exports.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::corpus::Vocabulary;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("vocabulary has {vocab} words but the model decodes {model}")]
    DimensionMismatch { vocab: usize, model: usize },
    #[error("vocabulary hash {vocab} does not match the model's {model}")]
    StaleVocabulary { vocab: String, model: String },
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Word-by-topic ratio table plus everything needed to lay it out: hazard
/// coefficients, display row order, labels, and the word → feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicReport {
    /// `exp(B)` in word-major layout: `ratios[u * k + g]`.
    pub ratios: Vec<f64>,
    pub betas: Vec<f64>,
    pub row_order: Vec<usize>,
    pub word_labels: Vec<String>,
    /// Word label → original feature name.
    pub feature_groups: BTreeMap<String, String>,
    /// Index of the topic most associated with shorter survival
    /// (largest hazard coefficient).
    pub anti_topic: usize,
}

impl TopicReport {
    pub fn d(&self) -> usize {
        self.word_labels.len()
    }

    pub fn k(&self) -> usize {
        self.betas.len()
    }
}

/// Builds the interpretation table for a trained model. The vocabulary must
/// be the one the model was trained against, both by hash and by size.
pub fn build_report(
    ckpt: &ModelCheckpoint,
    vocab: &Vocabulary,
) -> Result<TopicReport, InterpretError> {
    let dec = ckpt.decoder()?;
    let (k, d) = dec.dims();
    if vocab.size() != d {
        return Err(InterpretError::DimensionMismatch {
            vocab: vocab.size(),
            model: d,
        });
    }
    if vocab.hash() != ckpt.vocab_hash {
        return Err(InterpretError::StaleVocabulary {
            vocab: vocab.hash(),
            model: ckpt.vocab_hash.clone(),
        });
    }
    let betas = ckpt.cox_head()?.beta;
    if betas.len() != k {
        return Err(InterpretError::DimensionMismatch {
            vocab: k,
            model: betas.len(),
        });
    }

    let mut ratios = vec![0.0; d * k];
    for g in 0..k {
        for u in 0..d {
            ratios[u * k + g] = dec.b.data()[g * d + u].exp();
        }
    }
    let word_labels = vocab.words().to_vec();
    let features: Vec<String> = (0..d).map(|u| vocab.word_feature(u).to_string()).collect();
    let feature_groups = word_labels
        .iter()
        .cloned()
        .zip(features.iter().cloned())
        .collect();
    let row_order = sort_rows(&ratios, k, &features);
    let anti_topic = (0..k)
        .max_by(|&a, &b| betas[a].total_cmp(&betas[b]))
        .expect("k >= 1");
    Ok(TopicReport {
        ratios,
        betas,
        row_order,
        word_labels,
        feature_groups,
        anti_topic,
    })
}

/// Display permutation for the ratio table: features ordered by descending
/// group spread (the largest per-row max−min among the feature's words),
/// rows within a feature kept in their original bin order.
pub fn sort_rows(ratios: &[f64], k: usize, features: &[String]) -> Vec<usize> {
    let d = features.len();
    assert_eq!(ratios.len(), d * k, "ratio table shape");
    // Feature blocks in first-appearance order.
    let mut block_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut blocks: Vec<(Vec<usize>, f64)> = Vec::new();
    for (u, f) in features.iter().enumerate() {
        let row = &ratios[u * k..(u + 1) * k];
        let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - row.iter().cloned().fold(f64::INFINITY, f64::min);
        match block_of.get(f.as_str()) {
            Some(&b) => {
                blocks[b].0.push(u);
                blocks[b].1 = blocks[b].1.max(spread);
            }
            None => {
                block_of.insert(f, blocks.len());
                blocks.push((vec![u], spread));
            }
        }
    }
    // Stable on ties, so equal-spread features keep first-appearance order.
    blocks.sort_by(|a, b| b.1.total_cmp(&a.1));
    blocks.into_iter().flat_map(|(rows, _)| rows).collect()
}

const CELL_W: usize = 26;
const CELL_H: usize = 16;
const LABEL_W: usize = 150;
const HEADER_H: usize = 52;

fn percentile_99(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = 0.99 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - pos.floor()) * (sorted[hi] - sorted[lo])
}

fn cell_color(ratio: f64, p99: f64) -> String {
    // White at the background ratio 1.0, saturating red at the 99th
    // percentile; ratios below background stay white.
    let span = (p99 - 1.0).max(1e-12);
    let t = ((ratio - 1.0) / span).clamp(0.0, 1.0);
    let g = (255.0 - t * (255.0 - 24.0)).round() as u8;
    let b = (255.0 - t * (255.0 - 43.0)).round() as u8;
    let r = (255.0 - t * (255.0 - 178.0)).round() as u8;
    format!("rgb({r},{g},{b})")
}

/// Renders the report as a deterministic SVG heatmap: one row per word in
/// display order, one column per topic headed by its hazard coefficient.
pub fn render_heatmap(report: &TopicReport) -> String {
    let (d, k) = (report.d(), report.k());
    let width = LABEL_W + k * CELL_W + 10;
    let height = HEADER_H + d * CELL_H + 10;
    let p99 = percentile_99(&report.ratios);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"10\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"14\" text-anchor=\"middle\">Cox Regression Coefficient</text>\n",
        LABEL_W + k * CELL_W / 2
    ));
    for g in 0..k {
        let x = LABEL_W + g * CELL_W + CELL_W / 2;
        let marker = if g == report.anti_topic { "*" } else { "" };
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"32\" text-anchor=\"middle\" class=\"beta\">{:.3}{marker}</text>\n",
            report.betas[g]
        ));
    }
    for (r, &u) in report.row_order.iter().enumerate() {
        let y = HEADER_H + r * CELL_H;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            LABEL_W - 4,
            y + CELL_H - 4,
            report.word_labels[u]
        ));
        for g in 0..k {
            let x = LABEL_W + g * CELL_W;
            let fill = cell_color(report.ratios[u * k + g], p99);
            svg.push_str(&format!(
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" \
                 fill=\"{fill}\" stroke=\"#cccccc\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// CSV form of the table, rows in display order; the header carries the
/// hazard coefficient of each topic column.
pub fn report_csv(report: &TopicReport) -> String {
    let k = report.k();
    let mut out = String::from("word,feature");
    for (g, b) in report.betas.iter().enumerate() {
        out.push_str(&format!(",topic_{}_beta={}", g + 1, b));
    }
    out.push('\n');
    for &u in &report.row_order {
        let label = &report.word_labels[u];
        out.push_str(label);
        out.push(',');
        out.push_str(&report.feature_groups[label]);
        for g in 0..k {
            out.push_str(&format!(",{}", report.ratios[u * k + g]));
        }
        out.push('\n');
    }
    out
}

/// Per-topic list of the words with the largest positive deviations from
/// the background (ratio > 1), at most `per_topic` each.
pub fn top_words(report: &TopicReport, per_topic: usize) -> String {
    let (d, k) = (report.d(), report.k());
    let mut out = String::new();
    for g in 0..k {
        let role = if g == report.anti_topic {
            "anti-survival"
        } else {
            "pro-survival"
        };
        out.push_str(&format!(
            "topic {} (beta {:.3}, {role})\n",
            g + 1,
            report.betas[g]
        ));
        let mut ranked: Vec<usize> = (0..d)
            .filter(|&u| report.ratios[u * k + g] > 1.0)
            .collect();
        ranked.sort_by(|&a, &b| {
            report.ratios[b * k + g]
                .total_cmp(&report.ratios[a * k + g])
                .then(a.cmp(&b))
        });
        for &u in ranked.iter().take(per_topic) {
            out.push_str(&format!(
                "  {} {}\n",
                report.word_labels[u],
                report.ratios[u * k + g]
            ));
        }
    }
    out
}
