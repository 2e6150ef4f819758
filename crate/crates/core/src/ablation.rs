//! Fit-and-score helpers on synthetic data, and the ablation harness that
//! compares joint vs individual tuning, change extraction on/off, and clue
//! on/off.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{mix, synth_generate, SynthConfig, SynthSample};
use crate::lm::stub_clue;
use crate::metrics::{cider_d, normalize_answer, vqa_accuracy, CaptionEval, CiderConfig, VqaRecord};
use crate::param::Module;
use crate::model::{build_vocab, Example, Model, ModelConfig, ModelError};
use crate::train::{pretrain_change_module, train_joint, LogRecord, TrainConfig, TrainError};
use crate::vision::VisualKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Recipe {
    pub model: ModelConfig,
    /// Stage-1 settings; skipped when `total_steps` is 0 or the model does not
    /// extract change.
    pub pretrain: TrainConfig,
    pub joint: TrainConfig,
    pub use_clue: bool,
    pub max_new: usize,
}

impl Default for Recipe {
    fn default() -> Self {
        let desk = TrainConfig { max_lr: 3e-3, total_steps: 300, batch_size: 8, ..Default::default() };
        Recipe { model: ModelConfig::default(), pretrain: TrainConfig { total_steps: 200, ..desk.clone() }, joint: desk, use_clue: true, max_new: 16 }
    }
}

impl Recipe {
    pub fn with_seed(&self, seed: u64) -> Recipe {
        let mut r = self.clone();
        r.model.seed = seed;
        r.pretrain.seed = seed;
        r.joint.seed = seed;
        r
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub pretrain_log: Vec<LogRecord>,
    pub log: Vec<LogRecord>,
}

pub fn clue_for(recipe: &Recipe, s: &SynthSample) -> Option<String> {
    recipe.use_clue.then(|| stub_clue(&s.input, ""))
}

/// Samples in the seeded mixed order.
pub fn mixed(samples: &[SynthSample], seed: u64) -> Result<Vec<SynthSample>, TrainError> {
    let m = mix(vec![samples.iter().map(|s| s.record.clone()).collect()], seed).map_err(|e| TrainError::Contract(e.to_string()))?;
    Ok(m.order.iter().map(|&i| samples[i].clone()).collect())
}

/// Build a model over `vocab_from`, pretrain the change module on the pair
/// samples, then tune jointly on everything in mixed order.
pub fn fit(train: &[SynthSample], vocab_from: &[SynthSample], recipe: &Recipe, mut on_step: impl FnMut(&str, &LogRecord)) -> Result<FitResult, TrainError> {
    let records: Vec<_> = vocab_from.iter().chain(train).map(|s| s.record.clone()).collect();
    let mut model = Model::new(recipe.model, build_vocab(&records, recipe.model.frames))?;
    let pairs: Vec<SynthSample> = train.iter().filter(|s| s.input.kind() == VisualKind::Pair).cloned().collect();
    let pretrain_log = if recipe.model.change_extraction && !pairs.is_empty() && recipe.pretrain.total_steps > 0 {
        pretrain_change_module(&mut model, &pairs, &recipe.pretrain, |r| on_step("pretrain", r))?
    } else {
        Vec::new()
    };
    model.freeze_prefixes(&recipe.joint.freeze, true);
    let order = mixed(train, recipe.joint.seed)?;
    let examples = order
        .iter()
        .map(|s| model.example(&s.record, s.input.clone(), clue_for(recipe, s).as_deref(), &s.record.target))
        .collect::<Result<Vec<Example>, ModelError>>()?;
    let log = train_joint(&mut model, &examples, &recipe.joint, |r| on_step("joint", r))?;
    Ok(FitResult { model, pretrain_log, log })
}

/// Greedy predictions for `samples`.
pub fn predict_all(model: &Model, samples: &[SynthSample], recipe: &Recipe) -> Result<Vec<String>, ModelError> {
    samples.iter().map(|s| model.predict(&s.record, &s.input, clue_for(recipe, s).as_deref(), recipe.max_new)).collect()
}

/// Per-kind scores on a held-out set. Missing kinds score `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub vqa_accuracy: Option<f64>,
    pub cider: Option<f64>,
    pub video_oa: Option<f64>,
}

pub fn score(samples: &[SynthSample], predictions: &[String]) -> Result<Scores, TrainError> {
    let mut vqa = Vec::new();
    let mut caps = Vec::new();
    let (mut vid_ok, mut vid_n) = (0usize, 0usize);
    for (s, p) in samples.iter().zip(predictions) {
        match s.input.kind() {
            VisualKind::Single => vqa.push(VqaRecord {
                category: s.record.category.clone().unwrap_or_else(|| "other".into()),
                prediction: p.clone(),
                gold: s.record.target.clone(),
            }),
            VisualKind::Pair => caps.push(CaptionEval { candidate: p.clone(), references: s.record.caption_refs() }),
            VisualKind::Video => {
                vid_n += 1;
                vid_ok += usize::from(normalize_answer(p) == normalize_answer(&s.record.target));
            }
        }
    }
    let err = |e: crate::metrics::MetricsError| TrainError::Contract(e.to_string());
    Ok(Scores {
        vqa_accuracy: if vqa.is_empty() { None } else { Some(vqa_accuracy(&vqa).map_err(err)?.micro) },
        cider: if caps.is_empty() { None } else { Some(cider_d(&caps, &CiderConfig::default()).map_err(err)?.score) },
        video_oa: (vid_n > 0).then(|| vid_ok as f64 / vid_n as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Joint tuning with change extraction and clues.
    Joint,
    /// One model per task.
    Individual,
    NoChangeExtraction,
    NoClue,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Joint, Variant::Individual, Variant::NoChangeExtraction, Variant::NoClue];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::Individual => "individual",
            Variant::NoChangeExtraction => "joint w/o change extraction",
            Variant::NoClue => "joint w/o clue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_per_kind: usize,
    pub test_per_kind: usize,
    pub recipe: Recipe,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2], train_per_kind: 16, test_per_kind: 16, recipe: Recipe::default(), variants: Variant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<Scores>,
    pub mean: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Seed-averaged CIDEr-D with change extraction is at least the score
    /// without it. `None` when either variant was not run.
    pub fn change_extraction_helps(&self) -> Option<bool> {
        let with = self.row(Variant::Joint)?.mean.cider?;
        let without = self.row(Variant::NoChangeExtraction)?.mean.cider?;
        Some(with >= without)
    }

    pub fn text_table(&self) -> String {
        let f = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.2}", x * scale));
        let mut rows = vec![vec!["Configuration".to_string(), "VQA acc. (%)".into(), "CIDEr-D (x100)".into(), "Video OA (%)".into()]];
        for r in &self.rows {
            rows.push(vec![r.variant.label().to_string(), f(r.mean.vqa_accuracy, 100.0), f(r.mean.cider, 100.0), f(r.mean.video_oa, 100.0)]);
        }
        crate::metrics::render_table(&rows)
    }
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_scores(s: &[Scores]) -> Scores {
    Scores {
        vqa_accuracy: mean_of(s.iter().map(|x| x.vqa_accuracy)),
        cider: mean_of(s.iter().map(|x| x.cider)),
        video_oa: mean_of(s.iter().map(|x| x.video_oa)),
    }
}

/// Train and test on fresh synthetic data for one variant and seed.
pub fn run_variant(variant: Variant, seed: u64, cfg: &AblationConfig) -> Result<Scores, TrainError> {
    let synth = SynthConfig { frames: cfg.recipe.model.frames, size: cfg.recipe.model.image_size, ..Default::default() };
    let gen = |kind, n, s| synth_generate(kind, n, s, &synth).map_err(|e| TrainError::Contract(e.to_string()));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in VisualKind::ALL {
        train.push(gen(kind, cfg.train_per_kind, seed)?);
        test.push(gen(kind, cfg.test_per_kind, seed.wrapping_add(1_000_003))?);
    }
    let mut recipe = cfg.recipe.with_seed(seed);
    match variant {
        Variant::NoChangeExtraction => recipe.model.change_extraction = false,
        Variant::NoClue => recipe.use_clue = false,
        _ => {}
    }
    let all_test: Vec<SynthSample> = test.concat();
    let all_train: Vec<SynthSample> = train.concat();
    let vocab_from: Vec<SynthSample> = all_train.iter().chain(&all_test).cloned().collect();
    if variant == Variant::Individual {
        let mut parts = Scores::default();
        for (tr, te) in train.iter().zip(&test) {
            let fitted = fit(tr, &vocab_from, &recipe, |_, _| {})?;
            let s = score(te, &predict_all(&fitted.model, te, &recipe)?)?;
            parts.vqa_accuracy = parts.vqa_accuracy.or(s.vqa_accuracy);
            parts.cider = parts.cider.or(s.cider);
            parts.video_oa = parts.video_oa.or(s.video_oa);
        }
        return Ok(parts);
    }
    let fitted = fit(&all_train, &vocab_from, &recipe, |_, _| {})?;
    score(&all_test, &predict_all(&fitted.model, &all_test, &recipe)?)
}

/// Run every variant under every seed. Jobs are independent and spread over
/// `threads` workers; results are reported in variant-then-seed order.
pub fn run_ablation(cfg: &AblationConfig, threads: usize, mut on_done: impl FnMut(Variant, u64, &Scores)) -> Result<AblationReport, TrainError> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() || cfg.train_per_kind == 0 || cfg.test_per_kind == 0 {
        return Err(TrainError::Config("ablation needs seeds, variants and nonempty splits".into()));
    }
    let jobs: Vec<(Variant, u64)> = cfg.variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Scores, TrainError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, s)) = jobs.get(i) else { break };
                let r = run_variant(v, s, cfg);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let mut results = Vec::with_capacity(jobs.len());
    for ((v, s), slot) in jobs.iter().zip(slots) {
        let r = slot.into_inner().expect("slot lock").expect("every job ran")?;
        on_done(*v, *s, &r);
        results.push(r);
    }
    let rows = cfg
        .variants
        .iter()
        .zip(results.chunks(cfg.seeds.len()))
        .map(|(&variant, per_seed)| AblationRow { variant, mean: mean_scores(per_seed), per_seed: per_seed.to_vec() })
        .collect();
    Ok(AblationReport { seeds: cfg.seeds.clone(), rows })
}

/// Worker count for [`run_ablation`] from the host.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
