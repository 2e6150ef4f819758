use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use mtrs::ablation::{default_threads, run_ablation};
use mtrs::config::{ConfigError, RunConfig};
use mtrs::data::{load_samples, synth_generate, write_synth, SynthConfig, SynthSample, ERA_LABELS, SYNTH_VIDEO_LABELS};
use mtrs::lm::stub_clue;
use mtrs::metrics::{cider_d, classification_report, vqa_accuracy, CaptionEval, CiderConfig, PredictionRecord, VqaRecord};
use mtrs::model::{build_vocab, Model};
use mtrs::param::Module;
use mtrs::train::{log_jsonl, lr_at, pretrain_change_module, train_joint, LogRecord, TrainError};
use mtrs::vision::VisualKind;

use crate::{Command, ConfigArgs, Task};

pub const EXIT_IO: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Diverged(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(e: impl fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        io(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            e => io(e),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(v).expect("value serializes") + "\n")
}

fn resolve(cfg: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::from_env(cfg.config.as_deref(), &cfg.overrides)?)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag.or_else(|| cfg.out.clone()).ok_or_else(|| CliError::Usage("--out is required (or set `out` in the config)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_all(flags: &[PathBuf], cfg: &RunConfig) -> Result<Vec<SynthSample>> {
    let paths = if flags.is_empty() { &cfg.manifests } else { flags };
    if paths.is_empty() {
        return Err(CliError::Usage("no manifest given (--manifest or `manifests` in the config)".into()));
    }
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_samples(p, None).map_err(io)?);
    }
    Ok(all)
}

fn progress(stage: &'static str, every: usize) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| {
        if r.step.is_multiple_of(every) {
            log::info!("{stage} step {} lr {:.3e} loss {:.4}", r.step, r.lr, r.loss);
        }
    }
}

fn new_model(samples: &[SynthSample], cfg: &RunConfig) -> Result<Model> {
    let records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
    let recipe = cfg.recipe();
    Model::new(recipe.model, build_vocab(&records, recipe.model.frames)).map_err(io)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { kind, n, seed, size, frames, test_fraction, out } => {
            let seed = match seed {
                Some(s) => s,
                None => RunConfig::from_env(None, &[])?.seed,
            };
            let cfg = SynthConfig { size, frames, test_fraction };
            let samples = synth_generate(kind, n as usize, seed, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            let manifest = write_synth(&out, &samples).map_err(io)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::PretrainChange { cfg, manifest, out } => {
            let rc = resolve(&cfg)?;
            let out = out_dir(out, &rc)?;
            let samples = load_all(&manifest, &rc)?;
            let pairs: Vec<SynthSample> = samples.iter().filter(|s| s.input.kind() == VisualKind::Pair).cloned().collect();
            let mut model = new_model(&samples, &rc)?;
            let log = pretrain_change_module(&mut model, &pairs, &rc.recipe().pretrain, progress("pretrain", 50))?;
            write_file(&out.join("pretrain_log.jsonl"), log_jsonl(&log))?;
            model.save_bundle(&out.join("model.ckpt")).map_err(io)?;
            write_json(&out.join("config.json"), &rc)
        }
        Command::Train { cfg, manifest, init, out } => {
            let rc = resolve(&cfg)?;
            let out = out_dir(out, &rc)?;
            let samples = load_all(&manifest, &rc)?;
            let recipe = rc.recipe();
            let mut model = new_model(&samples, &rc)?;
            if let Some(init) = init {
                let n = ["encoder.", "change.", "projector."]
                    .iter()
                    .map(|p| model.load_params(&init, p))
                    .sum::<std::result::Result<usize, _>>()
                    .map_err(|e| io(format!("{}: {e}", init.display())))?;
                log::info!("restored {n} tensors from {}", init.display());
            } else if recipe.model.change_extraction && recipe.pretrain.total_steps > 0 {
                let pairs: Vec<SynthSample> = samples.iter().filter(|s| s.input.kind() == VisualKind::Pair).cloned().collect();
                if !pairs.is_empty() {
                    let log = pretrain_change_module(&mut model, &pairs, &recipe.pretrain, progress("pretrain", 50))?;
                    write_file(&out.join("pretrain_log.jsonl"), log_jsonl(&log))?;
                }
            }
            model.freeze_prefixes(&recipe.joint.freeze, true);
            let order = mtrs::ablation::mixed(&samples, recipe.joint.seed)?;
            let examples = order
                .iter()
                .map(|s| {
                    let clue = recipe.use_clue.then(|| stub_clue(&s.input, ""));
                    model.example(&s.record, s.input.clone(), clue.as_deref(), &s.record.target)
                })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(io)?;
            let log = train_joint(&mut model, &examples, &recipe.joint, progress("train", 50))?;
            write_file(&out.join("train_log.jsonl"), log_jsonl(&log))?;
            model.save_bundle(&out.join("model.ckpt")).map_err(io)?;
            write_json(&out.join("config.json"), &rc)
        }
        Command::Eval { task, predictions, out } => eval(task, &predictions, &out),
        Command::Infer { cfg, task, checkpoint, manifest, no_clue, out } => {
            let rc = resolve(&cfg)?;
            let model = Model::load_bundle(&checkpoint).map_err(io)?;
            let samples = load_samples(&manifest, None).map_err(io)?;
            let use_clue = rc.use_clue && !no_clue;
            let mut lines = String::new();
            for s in &samples {
                if s.input.kind() != task.kind() {
                    return Err(io(format!("record {} is {} but the task expects {}", s.record.id, s.input.kind(), task.kind())));
                }
                let clue = use_clue.then(|| stub_clue(&s.input, ""));
                let prompt = model.prompt_text(&s.record, &s.input, clue.as_deref()).map_err(io)?;
                let prediction = model.predict(&s.record, &s.input, clue.as_deref(), rc.max_new).map_err(io)?;
                let rec = PredictionRecord {
                    id: s.record.id.clone(),
                    category: s.record.category.clone(),
                    prediction,
                    gold: (task != Task::Cc).then(|| s.record.target.clone()),
                    references: (task == Task::Cc).then(|| s.record.caption_refs()),
                    prompt: Some(prompt),
                };
                lines += &(serde_json::to_string(&rec).expect("record serializes") + "\n");
            }
            write_file(&out.join("predictions.jsonl"), lines)
        }
        Command::InspectPack { cfg, manifest, id, checkpoint, out } => {
            let rc = resolve(&cfg)?;
            let samples = load_samples(&manifest, None).map_err(io)?;
            let s = samples.iter().find(|s| s.record.id == id).ok_or_else(|| io(format!("no record {id:?} in {}", manifest.display())))?;
            let model = match checkpoint {
                Some(c) => Model::load_bundle(&c).map_err(io)?,
                None => new_model(&samples, &rc)?,
            };
            let clue = rc.use_clue.then(|| stub_clue(&s.input, ""));
            let ex = model.example(&s.record, s.input.clone(), clue.as_deref(), &s.record.target).map_err(io)?;
            let packed = model.pack_example(&ex).map_err(io)?;
            let vocab = &model.vocab;
            let dump = packed.debug_dump(&|t| vocab.token(t).to_string());
            let text = serde_json::to_string_pretty(&dump).expect("dump serializes") + "\n";
            if let Some(out) = out {
                write_file(&out.join(format!("pack-{id}.json")), &text)?;
            }
            std::io::stdout().write_all(text.as_bytes()).map_err(io)
        }
        Command::LrCurve { cfg, out } => {
            let rc = resolve(&cfg)?;
            let mut csv = String::from("step,lr\n");
            for step in 0..=rc.train.total_steps {
                csv += &format!("{step},{:e}\n", lr_at(step, &rc.train)?);
            }
            write_file(&out.join("lr_curve.csv"), csv)
        }
        Command::Ablate { cfg, out } => {
            let rc = resolve(&cfg)?;
            let out = out_dir(out, &rc)?;
            let threads = rc.ablation.threads.unwrap_or_else(default_threads);
            let report = run_ablation(&rc.ablation_config(), threads, |v, seed, s| log::info!("{} seed {seed}: {s:?}", v.label()))?;
            let table = report.text_table();
            let check = match report.change_extraction_helps() {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "not run",
            };
            let summary = format!("{table}change extraction >= without on CIDEr-D: {check}\n");
            write_json(&out.join("ablation.json"), &report)?;
            write_file(&out.join("ablation.txt"), &summary)?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    if out.is_empty() {
        return Err(io(format!("{}: no predictions", path.display())));
    }
    Ok(out)
}

/// Label order for a video report: the ERA order, the synthetic order, or
/// sorted gold labels.
fn video_labels(records: &[PredictionRecord]) -> Vec<String> {
    let golds: Vec<&str> = records.iter().filter_map(|r| r.gold.as_deref()).collect();
    for set in [&ERA_LABELS[..], &SYNTH_VIDEO_LABELS[..]] {
        if golds.iter().all(|g| set.contains(g)) {
            return set.iter().map(|s| s.to_string()).collect();
        }
    }
    let mut v: Vec<String> = golds.iter().map(|s| s.to_string()).collect();
    v.sort();
    v.dedup();
    v
}

fn eval(task: Task, predictions: &Path, out: &Path) -> Result<()> {
    let records = read_predictions(predictions)?;
    let missing = |r: &PredictionRecord, what: &str| io(format!("prediction {} has no {what}", r.id));
    let (json, text) = match task {
        Task::Vqa => {
            let rows = records
                .iter()
                .map(|r| {
                    Ok(VqaRecord {
                        category: r.category.clone().unwrap_or_else(|| "other".into()),
                        prediction: r.prediction.clone(),
                        gold: r.gold.clone().ok_or_else(|| missing(r, "gold"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = vqa_accuracy(&rows).map_err(io)?;
            (serde_json::to_value(&rep).expect("report serializes"), rep.text_table())
        }
        Task::Cc => {
            let rows = records
                .iter()
                .map(|r| {
                    let references = r.references.clone().or_else(|| r.gold.clone().map(|g| vec![g])).ok_or_else(|| missing(r, "references"))?;
                    Ok(CaptionEval { candidate: r.prediction.clone(), references })
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = cider_d(&rows, &CiderConfig::default()).map_err(io)?;
            (serde_json::to_value(&rep).expect("report serializes"), rep.text_table())
        }
        Task::Video => {
            let pairs = records
                .iter()
                .map(|r| Ok((r.prediction.trim().to_string(), r.gold.clone().ok_or_else(|| missing(r, "gold"))?)))
                .collect::<Result<Vec<_>>>()?;
            let labels = video_labels(&records);
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            let rep = classification_report(&pairs, &refs).map_err(io)?;
            (serde_json::to_value(&rep).expect("report serializes"), rep.text_table())
        }
    };
    write_json(&out.join("report.json"), &json)?;
    write_file(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
