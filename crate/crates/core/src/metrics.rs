//! VQA accuracy, CIDEr-D and per-class precision with overall accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::split_words;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metrics contract: {0}")]
    Contract(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Lowercase, trim, drop trailing punctuation, collapse inner whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    /// Rendered prompt the prediction was generated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub category: String,
    pub prediction: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VqaReport {
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Question-weighted average, the "Avg. Accuracy" figure.
    pub micro: f64,
    /// Unweighted mean over categories.
    pub macro_avg: f64,
    pub correct: usize,
    pub total: usize,
}

/// Categories always shown, in table order, with their column titles.
pub const VQA_COLUMNS: [(&str, &str); 3] = [("presence", "Presence"), ("comparison", "Comparison"), ("rural_urban", "Rural/Urban")];

pub fn vqa_accuracy(records: &[VqaRecord]) -> Result<VqaReport> {
    if records.is_empty() {
        return Err(MetricsError::Contract("no VQA records to score".into()));
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = per.entry(r.category.clone()).or_insert((0, 0));
        e.1 += 1;
        if normalize_answer(&r.prediction) == normalize_answer(&r.gold) {
            e.0 += 1;
        }
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    let total = records.len();
    let per_category: BTreeMap<String, CategoryScore> = per
        .into_iter()
        .map(|(k, (c, t))| (k, CategoryScore { correct: c, total: t, accuracy: c as f64 / t as f64 }))
        .collect();
    let macro_avg = per_category.values().map(|s| s.accuracy).sum::<f64>() / per_category.len() as f64;
    Ok(VqaReport { per_category, micro: correct as f64 / total as f64, macro_avg, correct, total })
}

impl VqaReport {
    /// Presence, Comparison, Rural/Urban, any other categories, then Avg.
    /// Absent categories show "-". Values are percentages.
    pub fn text_table(&self) -> String {
        let mut cols: Vec<(String, Option<f64>)> = VQA_COLUMNS
            .iter()
            .map(|(k, title)| (title.to_string(), self.per_category.get(*k).map(|s| s.accuracy)))
            .collect();
        for (k, s) in &self.per_category {
            if !VQA_COLUMNS.iter().any(|(c, _)| c == k) {
                cols.push((k.clone(), Some(s.accuracy)));
            }
        }
        cols.push(("Avg. Accuracy".into(), Some(self.micro)));
        cols.push(("Macro Avg.".into(), Some(self.macro_avg)));
        render_table(&[cols.iter().map(|(t, _)| t.clone()).collect(), cols.iter().map(|(_, v)| pct(*v)).collect()])
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Left-aligned columns separated by two spaces.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let n = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(j, c)| format!("{c:<w$}", w = widths[j])).collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiderConfig {
    pub max_n: usize,
    pub sigma: f64,
    pub scale: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig { max_n: 4, sigma: 6.0, scale: 10.0 }
    }
}

/// One image: a candidate and its references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiderReport {
    pub score: f64,
    pub per_image: Vec<f64>,
}

/// Caption words: lowercase, punctuation tokens dropped.
pub fn caption_words(s: &str) -> Vec<String> {
    split_words(&s.to_lowercase())
        .into_iter()
        .filter(|w| !w.chars().all(|c| c.is_ascii_punctuation()) && w != "\n")
        .collect()
}

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(words: &[String], max_n: usize) -> Vec<Counts> {
    (1..=max_n)
        .map(|n| {
            let mut c = Counts::new();
            for g in words.windows(n) {
                *c.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
            c
        })
        .collect()
}

struct TfIdf {
    vecs: Vec<Counts>,
    norms: Vec<f64>,
    len: f64,
}

fn tfidf(counts: &[Counts], len: usize, df: &HashMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(counts.len());
    let mut norms = Vec::with_capacity(counts.len());
    for c in counts {
        let mut v = Counts::new();
        let mut norm = 0.0;
        for (g, tf) in c {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            let w = tf * (log_n - d.ln());
            norm += w * w;
            v.insert(g.clone(), w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf { vecs, norms, len: len as f64 }
}

fn similarity(h: &TfIdf, r: &TfIdf, sigma: f64) -> Vec<f64> {
    let delta = h.len - r.len;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    (0..h.vecs.len())
        .map(|n| {
            let mut val = 0.0;
            for (g, hv) in &h.vecs[n] {
                if let Some(rv) = r.vecs[n].get(g) {
                    val += hv.min(*rv) * rv;
                }
            }
            if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= h.norms[n] * r.norms[n];
            }
            val * penalty
        })
        .collect()
}

/// Corpus CIDEr-D: document frequencies over the references of every image,
/// per-image score averaged over n-gram orders and references then scaled.
pub fn cider_d(corpus: &[CaptionEval], cfg: &CiderConfig) -> Result<CiderReport> {
    if corpus.is_empty() {
        return Err(MetricsError::Contract("CIDEr-D needs at least one image".into()));
    }
    if corpus.iter().any(|e| e.references.is_empty()) {
        return Err(MetricsError::Contract("every image needs at least one reference".into()));
    }
    let cand_words: Vec<Vec<String>> = corpus.iter().map(|e| caption_words(&e.candidate)).collect();
    let ref_words: Vec<Vec<Vec<String>>> =
        corpus.iter().map(|e| e.references.iter().map(|r| caption_words(r)).collect()).collect();
    let ref_counts: Vec<Vec<Vec<Counts>>> =
        ref_words.iter().map(|rs| rs.iter().map(|w| ngram_counts(w, cfg.max_n)).collect()).collect();
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in &ref_counts {
        let mut seen: HashSet<&Vec<String>> = HashSet::new();
        for r in rs {
            for c in r {
                seen.extend(c.keys());
            }
        }
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let mut per_image = Vec::with_capacity(corpus.len());
    for (i, cw) in cand_words.iter().enumerate() {
        if cw.is_empty() || ref_words[i].iter().any(Vec::is_empty) {
            log::warn!("CIDEr-D: image {i} has an empty candidate or reference, scoring 0");
            per_image.push(0.0);
            continue;
        }
        let h = tfidf(&ngram_counts(cw, cfg.max_n), cw.len(), &df, log_n);
        let mut total = 0.0;
        for (rc, rw) in ref_counts[i].iter().zip(&ref_words[i]) {
            let r = tfidf(rc, rw.len(), &df, log_n);
            let s = similarity(&h, &r, cfg.sigma);
            total += s.iter().sum::<f64>() / s.len() as f64;
        }
        per_image.push(cfg.scale * total / ref_counts[i].len() as f64);
    }
    let score = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderReport { score, per_image })
}

impl CiderReport {
    pub fn text_table(&self) -> String {
        render_table(&[vec!["Images".into(), "CIDEr-D".into()], vec![self.per_image.len().to_string(), format!("{:.2}", 100.0 * self.score)]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub label: String,
    /// `None` when the class was never predicted.
    pub precision: Option<f64>,
    pub predicted: usize,
    pub support: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub rows: Vec<ClassRow>,
    pub overall_accuracy: f64,
    /// `confusion[gold][pred]` in label order.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Per-class precision and overall accuracy over `(predicted, gold)` pairs.
/// Rows follow `labels`; a label outside it is an error.
pub fn classification_report(pairs: &[(String, String)], labels: &[&str]) -> Result<ClassReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Contract("no predictions to score".into()));
    }
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let lookup = |l: &str, what: &str| {
        index.get(l).copied().ok_or_else(|| {
            MetricsError::Contract(format!("{what} label {l:?} is not in the declared set [{}]", labels.join(", ")))
        })
    };
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, g) in pairs {
        let pi = lookup(normalize_answer(p).as_str(), "predicted").or_else(|_| lookup(p, "predicted"))?;
        let gi = lookup(g, "gold")?;
        confusion[gi][pi] += 1;
    }
    let rows = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..k).map(|g| confusion[g][c]).sum();
            ClassRow {
                label: labels[c].to_string(),
                precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                predicted,
                support: confusion[c].iter().sum(),
                true_positives: tp,
            }
        })
        .collect();
    let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(ClassReport { rows, overall_accuracy: trace as f64 / pairs.len() as f64, confusion, total: pairs.len() })
}

impl ClassReport {
    /// One column per class then OA; precisions in percent.
    pub fn text_table(&self) -> String {
        let mut head: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        head.push("OA".into());
        let mut vals: Vec<String> = self.rows.iter().map(|r| pct(r.precision)).collect();
        vals.push(pct(Some(self.overall_accuracy)));
        render_table(&[head, vals])
    }
}
