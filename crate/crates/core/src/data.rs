//! Sample manifests, the mixed training set, split accounting and the
//! procedural toy datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vision::{VisionError, VisualInput, VisualKind};

/// The 25 ERA labels in the column order of the per-class report.
pub const ERA_LABELS: [&str; 25] = [
    "post-earthquake",
    "flood",
    "fire",
    "landslide",
    "mudslide",
    "traffic collision",
    "traffic congestion",
    "harvesting",
    "ploughing",
    "constructing",
    "police chase",
    "conflict",
    "baseball",
    "basketball",
    "boating",
    "cycling",
    "running",
    "soccer",
    "swimming",
    "car racing",
    "party",
    "concert",
    "parade/protest",
    "religious activity",
    "non-event",
];

/// Trajectory classes of the toy videos.
pub const SYNTH_VIDEO_LABELS: [&str; 3] = ["linear", "circular", "static"];

pub const SYNTH_CHANGED_REFS: [&str; 5] = [
    "a building appears",
    "a new building is built",
    "there is a new building in the scene",
    "one building appears in the scene",
    "a building is constructed",
];

pub const SYNTH_UNCHANGED_REFS: [&str; 5] = [
    "the two scenes seem identical",
    "there is no change",
    "no difference between the two scenes",
    "nothing has changed",
    "the scene is the same as before",
];

/// Phrases that mark a change caption as describing no change.
pub const NO_CHANGE_PHRASES: [&str; 8] = [
    "no change",
    "no difference",
    "nothing has changed",
    "nothing changed",
    "identical",
    "the same as before",
    "unchanged",
    "no obvious",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetTag {
    Geochat,
    Levircc,
    Era,
    Synthetic(VisualKind),
}

impl DatasetTag {
    /// The only visual kind records of this dataset may have.
    pub fn kind(self) -> VisualKind {
        match self {
            DatasetTag::Geochat => VisualKind::Single,
            DatasetTag::Levircc => VisualKind::Pair,
            DatasetTag::Era => VisualKind::Video,
            DatasetTag::Synthetic(k) => k,
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetTag::Geochat => f.write_str("geochat"),
            DatasetTag::Levircc => f.write_str("levircc"),
            DatasetTag::Era => f.write_str("era"),
            DatasetTag::Synthetic(k) => write!(f, "synthetic-{k}"),
        }
    }
}

impl FromStr for DatasetTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "geochat" => Ok(DatasetTag::Geochat),
            "levircc" => Ok(DatasetTag::Levircc),
            "era" => Ok(DatasetTag::Era),
            _ => match s.strip_prefix("synthetic-").map(VisualKind::from_str) {
                Some(Ok(k)) => Ok(DatasetTag::Synthetic(k)),
                _ => Err(format!(
                    "unknown dataset tag {s:?} (expected geochat, levircc, era or synthetic-single|pair|video)"
                )),
            },
        }
    }
}

impl Serialize for DatasetTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DatasetTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub dataset_tag: DatasetTag,
    pub kind: VisualKind,
    pub visual_refs: Vec<String>,
    #[serde(default)]
    pub instruction: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Question category for VQA-style records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("field {field}: {detail}")]
pub struct ValidationError {
    pub field: &'static str,
    pub detail: String,
}

fn invalid(field: &'static str, detail: impl Into<String>) -> ValidationError {
    ValidationError { field, detail: detail.into() }
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.trim().is_empty() {
            return Err(invalid("id", "empty"));
        }
        if self.kind != self.dataset_tag.kind() {
            return Err(invalid("kind", format!("{} records must be {}, got {}", self.dataset_tag, self.dataset_tag.kind(), self.kind)));
        }
        let n = self.visual_refs.len();
        let ok = match self.kind {
            VisualKind::Single => n == 1,
            VisualKind::Pair => n == 2,
            VisualKind::Video => n >= 1,
        };
        if !ok {
            return Err(invalid("visual_refs", format!("{} references for a {} input", n, self.kind)));
        }
        if self.visual_refs.iter().any(|r| r.trim().is_empty()) {
            return Err(invalid("visual_refs", "empty reference"));
        }
        let native = matches!(self.dataset_tag, DatasetTag::Geochat | DatasetTag::Synthetic(VisualKind::Single));
        if native && self.instruction.trim().is_empty() {
            return Err(invalid("instruction", "records of this dataset carry their own instruction"));
        }
        if self.target.trim().is_empty() {
            return Err(invalid("target", "empty"));
        }
        if self.dataset_tag == DatasetTag::Era && !ERA_LABELS.contains(&self.target.as_str()) {
            return Err(invalid("target", format!("{:?} is not one of the 25 ERA labels", self.target)));
        }
        if let DatasetTag::Synthetic(VisualKind::Video) = self.dataset_tag {
            if !SYNTH_VIDEO_LABELS.contains(&self.target.as_str()) {
                return Err(invalid("target", format!("{:?} is not a synthetic video label", self.target)));
            }
        }
        if let Some(refs) = &self.references {
            if refs.is_empty() || refs.iter().any(|r| r.trim().is_empty()) {
                return Err(invalid("references", "references must be nonempty strings"));
            }
        }
        if self.dataset_tag == DatasetTag::Levircc {
            let m = self.references.as_ref().map_or(0, Vec::len);
            if m != 5 {
                return Err(invalid("references", format!("LEVIR-CC pairs carry 5 captions, got {m}")));
            }
        }
        Ok(())
    }

    /// Caption references, falling back to the target.
    pub fn caption_refs(&self) -> Vec<String> {
        self.references.clone().unwrap_or_else(|| vec![self.target.clone()])
    }

    /// Whether the gold caption says nothing changed.
    pub fn is_unchanged(&self) -> bool {
        is_no_change_caption(&self.target)
    }

    /// Load the pixels behind `visual_refs`, resolved against `base`.
    pub fn load_visual(&self, base: &Path) -> Result<VisualInput, VisionError> {
        let paths: Vec<PathBuf> = self.visual_refs.iter().map(|r| base.join(r)).collect();
        if paths.len() == 1 {
            return VisualInput::read_files(&paths[0], self.kind);
        }
        let frames = paths
            .iter()
            .map(|p| VisualInput::read_files(p, VisualKind::Single))
            .collect::<Result<Vec<_>, _>>()?;
        VisualInput::from_frames(self.kind, &frames)
    }
}

pub fn is_no_change_caption(caption: &str) -> bool {
    let c = caption.to_lowercase();
    NO_CHANGE_PHRASES.iter().any(|p| c.contains(p))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineErrorKind {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Invalid(ValidationError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct LineError {
    pub line: usize,
    pub kind: LineErrorKind,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {} bad line(s), first: {}", .errors.len(), .errors[0])]
    Manifest { path: String, errors: Vec<LineError> },
    #[error("data contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Parse and validate a JSONL manifest. Blank lines are skipped; every bad
/// line is reported with its 1-based number. With `expected`, records of
/// another dataset are rejected.
pub fn load_manifest(path: &Path, expected: Option<DatasetTag>) -> Result<Vec<SampleRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(LineError { line: i + 1, kind: LineErrorKind::Parse(e.to_string()) });
                continue;
            }
        };
        let check = rec.validate().and_then(|()| match expected {
            Some(t) if t != rec.dataset_tag => Err(invalid("dataset_tag", format!("expected {t}, got {}", rec.dataset_tag))),
            _ => Ok(()),
        });
        match check {
            Ok(()) => records.push(rec),
            Err(v) => errors.push(LineError { line: i + 1, kind: LineErrorKind::Invalid(v) }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(DataError::Manifest { path: path.display().to_string(), errors })
    }
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io_err(path))
}

/// The shuffled union of several datasets.
#[derive(Debug, Clone)]
pub struct MixedDataset {
    pub records: Vec<SampleRecord>,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Records in mixed order.
    pub fn iter(&self) -> impl Iterator<Item = &SampleRecord> {
        self.order.iter().map(|&i| &self.records[i])
    }

    pub fn get(&self, i: usize) -> &SampleRecord {
        &self.records[self.order[i]]
    }
}

/// Uniform seeded shuffle of the concatenated datasets.
pub fn mix(datasets: Vec<Vec<SampleRecord>>, seed: u64) -> Result<MixedDataset, DataError> {
    let records: Vec<SampleRecord> = datasets.into_iter().flatten().collect();
    if records.is_empty() {
        return Err(DataError::Contract("cannot mix an empty union of datasets".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MixedDataset { records, order, seed })
}

/// Like [`mix`], but dataset `i` contributes `round(weights[i] * n_i)`
/// draws: whole copies first, then a seeded subset for the remainder.
pub fn mix_weighted(datasets: Vec<Vec<SampleRecord>>, weights: &[f64], seed: u64) -> Result<MixedDataset, DataError> {
    if weights.len() != datasets.len() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(DataError::Contract(format!("{} weights for {} datasets", weights.len(), datasets.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut records = Vec::new();
    for (d, &w) in datasets.into_iter().zip(weights) {
        let want = (w * d.len() as f64).round() as usize;
        for _ in 0..want / d.len().max(1) {
            records.extend(d.iter().cloned());
        }
        let rest = want - (want / d.len().max(1)) * d.len();
        records.extend(rand::seq::index::sample(&mut rng, d.len(), rest).into_iter().map(|i| d[i].clone()));
    }
    mix(vec![records], seed)
}

/// Declared split sizes of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub total: usize,
    /// Relative tolerance on `total`; zero means exact.
    pub total_tolerance: f64,
    pub counts: BTreeMap<Split, usize>,
    pub fractions: BTreeMap<Split, f64>,
    /// Expected (changed, unchanged) pairs in the test split.
    pub test_changed: Option<(usize, usize)>,
    pub labels: Option<usize>,
}

impl SplitSpec {
    pub fn levircc() -> SplitSpec {
        SplitSpec {
            name: "LEVIR-CC".into(),
            total: 10_077,
            total_tolerance: 0.0,
            counts: BTreeMap::from([(Split::Train, 6_815), (Split::Val, 1_333), (Split::Test, 1_929)]),
            fractions: BTreeMap::from([(Split::Train, 0.676), (Split::Val, 0.132), (Split::Test, 0.192)]),
            test_changed: Some((964, 965)),
            labels: None,
        }
    }

    pub fn era() -> SplitSpec {
        SplitSpec {
            name: "ERA".into(),
            total: 2_864,
            total_tolerance: 0.0,
            counts: BTreeMap::from([(Split::Train, 1_473), (Split::Test, 1_391)]),
            fractions: BTreeMap::from([(Split::Train, 0.514), (Split::Test, 0.486)]),
            test_changed: None,
            labels: Some(25),
        }
    }

    /// Only the rounded size is published, so the total is checked to 0.5%.
    pub fn geochat() -> SplitSpec {
        SplitSpec {
            name: "GeoChat-Instruct".into(),
            total: 306_000,
            total_tolerance: 0.005,
            counts: BTreeMap::new(),
            fractions: BTreeMap::from([(Split::Train, 1.0)]),
            test_changed: None,
            labels: None,
        }
    }

    /// What the toy generator declares for `n` samples with a held-out
    /// fraction.
    pub fn synthetic(kind: VisualKind, n: usize, test_fraction: f64) -> SplitSpec {
        let test = synth_test_count(n, test_fraction);
        let mut counts = BTreeMap::from([(Split::Train, n - test)]);
        if test > 0 {
            counts.insert(Split::Test, test);
        }
        let fractions = counts.iter().map(|(s, c)| (*s, *c as f64 / n as f64)).collect();
        SplitSpec {
            name: format!("synthetic-{kind}"),
            total: n,
            total_tolerance: 0.0,
            counts,
            fractions,
            test_changed: None,
            labels: (kind == VisualKind::Video).then_some(SYNTH_VIDEO_LABELS.len()),
        }
    }

    /// Stated fractions must sum to one within half a percent.
    pub fn check_fractions(&self) -> Result<(), String> {
        let s: f64 = self.fractions.values().sum();
        if (s - 1.0).abs() > 0.005 {
            return Err(format!("{}: split fractions sum to {s}", self.name));
        }
        Ok(())
    }
}

/// Observed counts of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub total: usize,
    pub counts: BTreeMap<Split, usize>,
    pub unassigned: usize,
    pub test_changed: (usize, usize),
    pub labels: usize,
}

pub fn split_report(records: &[SampleRecord]) -> SplitReport {
    let mut counts = BTreeMap::new();
    let mut unassigned = 0;
    let mut changed = (0, 0);
    let mut labels = std::collections::BTreeSet::new();
    for r in records {
        match r.split {
            Some(s) => *counts.entry(s).or_insert(0) += 1,
            None => unassigned += 1,
        }
        if r.split == Some(Split::Test) && r.kind == VisualKind::Pair {
            if r.is_unchanged() {
                changed.1 += 1;
            } else {
                changed.0 += 1;
            }
        }
        if r.kind == VisualKind::Video {
            labels.insert(r.target.as_str());
        }
    }
    SplitReport { total: records.len(), counts, unassigned, test_changed: changed, labels: labels.len() }
}

/// Compare a manifest with a spec; every discrepancy is listed.
pub fn check_splits(records: &[SampleRecord], spec: &SplitSpec) -> Result<SplitReport, Vec<String>> {
    let r = split_report(records);
    let mut problems = Vec::new();
    if let Err(e) = spec.check_fractions() {
        problems.push(e);
    }
    let slack = (spec.total as f64 * spec.total_tolerance).round() as usize;
    if r.total.abs_diff(spec.total) > slack {
        problems.push(format!("{}: {} records, expected {}", spec.name, r.total, spec.total));
    }
    for (s, &want) in &spec.counts {
        let got = r.counts.get(s).copied().unwrap_or(0);
        if got != want {
            problems.push(format!("{}: {s} split has {got} records, expected {want}", spec.name));
        }
    }
    for (s, &f) in &spec.fractions {
        if spec.counts.is_empty() && r.total > 0 {
            let got = r.counts.get(s).copied().unwrap_or(0) as f64 / r.total as f64;
            if (got - f).abs() > 0.005 {
                problems.push(format!("{}: {s} fraction {got:.4}, expected {f}", spec.name));
            }
        }
    }
    if let Some(want) = spec.test_changed {
        if r.test_changed != want {
            problems.push(format!(
                "{}: test split has {} changed / {} unchanged pairs, expected {} / {}",
                spec.name, r.test_changed.0, r.test_changed.1, want.0, want.1
            ));
        }
    }
    if let Some(want) = spec.labels {
        if r.labels != want {
            problems.push(format!("{}: {} distinct labels, expected {want}", spec.name, r.labels));
        }
    }
    if problems.is_empty() {
        Ok(r)
    } else {
        Err(problems)
    }
}

/// Toy data settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub frames: usize,
    /// Trailing share of samples marked as test.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 16, frames: 4, test_fraction: 0.0 }
    }
}

fn synth_test_count(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).min(n)
}

/// A record with its pixels, generated or loaded.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub input: VisualInput,
}

/// Load a manifest and every record's pixels, resolving references against
/// the manifest's directory.
pub fn load_samples(path: &Path, expected: Option<DatasetTag>) -> Result<Vec<SynthSample>, DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    load_manifest(path, expected)?
        .into_iter()
        .map(|record| {
            let input = record.load_visual(base)?;
            Ok(SynthSample { record, input })
        })
        .collect()
}

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const COLORS: [(&str, [f64; 3]); 3] = [("red", [0.9, 0.1, 0.1]), ("green", [0.1, 0.85, 0.2]), ("blue", [0.15, 0.2, 0.95])];

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn noise(size: usize, level: f64, rng: &mut ChaCha8Rng) -> Canvas {
        Canvas { size, px: (0..3 * size * size).map(|_| rng.gen_range(0.0..level)).collect() }
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        if y < self.size && x < self.size {
            for (c, v) in rgb.iter().enumerate() {
                self.px[(c * self.size + y) * self.size + x] = *v;
            }
        }
    }

    fn shape(&mut self, shape: &str, cy: usize, cx: usize, r: usize, rgb: [f64; 3]) {
        let (cy, cx, r) = (cy as i64, cx as i64, r as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = match shape {
                    "circle" => dy * dy + dx * dx <= r * r,
                    "square" => true,
                    _ => dy >= -r && dx.abs() <= (dy + r) / 2,
                };
                if inside && cy + dy >= 0 && cx + dx >= 0 {
                    self.set((cy + dy) as usize, (cx + dx) as usize, rgb);
                }
            }
        }
    }
}

fn synth_single(i: usize, size: usize, rng: &mut ChaCha8Rng) -> (VisualInput, String, String, &'static str) {
    let mut canvas = Canvas::noise(size, 0.15, rng);
    let count = rng.gen_range(1..=2);
    let r = (size / 6).max(1);
    let mut placed: Vec<(&str, &str)> = Vec::new();
    // Shapes go into distinct quadrants so they never overlap.
    let mut quads = [0usize, 1, 2, 3];
    quads.shuffle(rng);
    for &q in quads.iter().take(count) {
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let (cname, rgb) = COLORS[rng.gen_range(0..COLORS.len())];
        let cy = (q / 2) * size / 2 + size / 4;
        let cx = (q % 2) * size / 2 + size / 4;
        canvas.shape(shape, cy, cx, r, rgb);
        placed.push((shape, cname));
    }
    let (question, answer, category) = match i % 3 {
        0 => {
            let s = SHAPES[rng.gen_range(0..SHAPES.len())];
            let yes = placed.iter().any(|(p, _)| *p == s);
            (format!("Is there a {s}?"), if yes { "yes" } else { "no" }.to_string(), "presence")
        }
        1 => {
            let (s, c) = placed[0];
            (format!("What color is the {s}?"), c.to_string(), "other")
        }
        _ => ("How many shapes are there?".to_string(), ["one", "two"][placed.len() - 1].to_string(), "count"),
    };
    let input = VisualInput::new(VisualKind::Single, 1, size, size, canvas.px).expect("synthetic pixels are valid");
    (input, question, answer, category)
}

fn synth_pair(size: usize, rng: &mut ChaCha8Rng) -> (VisualInput, VisualInput, bool) {
    let base = Canvas::noise(size, 0.3, rng);
    let jitter = |c: &Canvas, rng: &mut ChaCha8Rng| Canvas {
        size: c.size,
        px: c.px.iter().map(|v| (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)).collect(),
    };
    let t1 = jitter(&base, rng);
    let mut t2 = jitter(&base, rng);
    let changed = rng.gen_bool(0.5);
    if changed {
        let h = rng.gen_range(size / 4..=size / 2);
        let w = rng.gen_range(size / 4..=size / 2);
        let y0 = rng.gen_range(0..=size - h);
        let x0 = rng.gen_range(0..=size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                t2.set(y, x, [0.85, 0.85, 0.8]);
            }
        }
    }
    let f = |c: Canvas| VisualInput::new(VisualKind::Single, 1, size, size, c.px).expect("synthetic pixels are valid");
    (f(t1), f(t2), changed)
}

fn synth_video(size: usize, frames: usize, rng: &mut ChaCha8Rng) -> (VisualInput, &'static str) {
    let label = SYNTH_VIDEO_LABELS[rng.gen_range(0..SYNTH_VIDEO_LABELS.len())];
    let s = size as f64;
    let (y0, x0) = (rng.gen_range(0.25 * s..0.75 * s), rng.gen_range(0.25 * s..0.75 * s));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = 0.3 * s;
    let step = 0.5 * s / frames.max(1) as f64;
    let mut pixels = Vec::with_capacity(frames * 3 * size * size);
    for t in 0..frames {
        let tf = t as f64;
        let (y, x) = match label {
            "linear" => {
                let y = (0.2 * s + tf * step * angle.sin().abs()).min(s - 1.0);
                (y, (0.2 * s + tf * step).min(s - 1.0))
            }
            "circular" => {
                let a = angle + tf * std::f64::consts::TAU / frames.max(1) as f64;
                (0.5 * s + radius * a.sin(), 0.5 * s + radius * a.cos())
            }
            _ => (y0, x0),
        };
        let mut c = Canvas::noise(size, 0.1, rng);
        let (yi, xi) = (y.round() as usize, x.round() as usize);
        for dy in 0..2 {
            for dx in 0..2 {
                c.set(yi + dy, xi + dx, [1.0, 1.0, 1.0]);
            }
        }
        pixels.extend(c.px);
    }
    (VisualInput::new(VisualKind::Video, frames, size, size, pixels).expect("synthetic pixels are valid"), label)
}

/// Class-list instruction for the toy videos.
pub fn synth_video_instruction() -> String {
    crate::prompt::class_list_instruction(&SYNTH_VIDEO_LABELS)
}

/// `n` procedural samples of one kind, fully determined by `seed`. Pixel
/// references are relative paths under `pixels/`.
pub fn synth_generate(kind: VisualKind, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthSample>, DataError> {
    if n == 0 {
        return Err(DataError::Contract("synthetic dataset needs n >= 1".into()));
    }
    if cfg.size < 4 || !cfg.size.is_multiple_of(4) || cfg.frames == 0 {
        return Err(DataError::Contract(format!("image size {} must be a positive multiple of 4 and frames positive", cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let test = synth_test_count(n, cfg.test_fraction);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{kind}-{seed}-{i:04}");
        let split = Some(if i >= n - test { Split::Test } else { Split::Train });
        let tag = DatasetTag::Synthetic(kind);
        let (record, input) = match kind {
            VisualKind::Single => {
                let (input, q, a, cat) = synth_single(i, cfg.size, &mut rng);
                let rec = SampleRecord {
                    id: id.clone(),
                    dataset_tag: tag,
                    kind,
                    visual_refs: vec![format!("pixels/{id}.f64")],
                    instruction: format!("{q} Answer in one word or a short phrase."),
                    target: a,
                    references: None,
                    split,
                    category: Some(cat.to_string()),
                };
                (rec, input)
            }
            VisualKind::Pair => {
                let (t1, t2, changed) = synth_pair(cfg.size, &mut rng);
                let refs = if changed { SYNTH_CHANGED_REFS } else { SYNTH_UNCHANGED_REFS };
                let rec = SampleRecord {
                    id: id.clone(),
                    dataset_tag: tag,
                    kind,
                    visual_refs: vec![format!("pixels/{id}-t1.f64"), format!("pixels/{id}-t2.f64")],
                    instruction: crate::prompt::LEVIRCC_INSTRUCTION.to_string(),
                    target: refs[0].to_string(),
                    references: Some(refs.iter().map(|s| s.to_string()).collect()),
                    split,
                    category: Some(if changed { "changed" } else { "unchanged" }.to_string()),
                };
                (rec, VisualInput::from_frames(VisualKind::Pair, &[t1, t2])?)
            }
            VisualKind::Video => {
                let (input, label) = synth_video(cfg.size, cfg.frames, &mut rng);
                let rec = SampleRecord {
                    id: id.clone(),
                    dataset_tag: tag,
                    kind,
                    visual_refs: vec![format!("pixels/{id}.f64")],
                    instruction: synth_video_instruction(),
                    target: label.to_string(),
                    references: None,
                    split,
                    category: None,
                };
                (rec, input)
            }
        };
        out.push(SynthSample { record, input });
    }
    Ok(out)
}

/// Write `samples` under `dir`: pixel files and `manifest.jsonl`.
pub fn write_synth(dir: &Path, samples: &[SynthSample]) -> Result<PathBuf, DataError> {
    let pixels = dir.join("pixels");
    std::fs::create_dir_all(&pixels).map_err(io_err(&pixels))?;
    for s in samples {
        let refs = &s.record.visual_refs;
        if refs.len() == 1 {
            let p = dir.join(&refs[0]);
            s.input.write_files(&p).map_err(io_err(&p))?;
        } else {
            let h = s.input.height();
            let w = s.input.width();
            for (i, r) in refs.iter().enumerate() {
                let frame = VisualInput::new(VisualKind::Single, 1, h, w, s.input.frame(i).to_vec())?;
                let p = dir.join(r);
                frame.write_files(&p).map_err(io_err(&p))?;
            }
        }
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(id: &str, tag: DatasetTag, kind: VisualKind, refs: usize) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            dataset_tag: tag,
            kind,
            visual_refs: (0..refs).map(|i| format!("{id}-{i}.f64")).collect(),
            instruction: "Is there a road?".into(),
            target: "yes".into(),
            references: None,
            split: None,
            category: None,
        }
    }

    #[test]
    fn tag_strings() {
        for t in [DatasetTag::Geochat, DatasetTag::Levircc, DatasetTag::Era, DatasetTag::Synthetic(VisualKind::Pair)] {
            assert_eq!(t.to_string().parse::<DatasetTag>().unwrap(), t);
        }
        assert!("synthetic-audio".parse::<DatasetTag>().is_err());
        assert_eq!(serde_json::to_string(&DatasetTag::Synthetic(VisualKind::Video)).unwrap(), "\"synthetic-video\"");
    }

    #[test]
    fn ref_count_must_match_kind() {
        let mut r = rec("a", DatasetTag::Geochat, VisualKind::Single, 2);
        assert_eq!(r.validate().unwrap_err().field, "visual_refs");
        r.visual_refs.pop();
        r.validate().unwrap();
        let p = rec("b", DatasetTag::Synthetic(VisualKind::Pair), VisualKind::Pair, 1);
        assert_eq!(p.validate().unwrap_err().field, "visual_refs");
        let k = rec("c", DatasetTag::Geochat, VisualKind::Pair, 2);
        assert_eq!(k.validate().unwrap_err().field, "kind");
    }

    #[test]
    fn levircc_needs_five_captions_and_era_a_known_label() {
        let mut r = rec("p", DatasetTag::Levircc, VisualKind::Pair, 2);
        r.references = Some(vec!["x".into(); 4]);
        assert_eq!(r.validate().unwrap_err().field, "references");
        r.references = Some(vec!["x".into(); 5]);
        r.validate().unwrap();
        let mut v = rec("v", DatasetTag::Era, VisualKind::Video, 1);
        assert_eq!(v.validate().unwrap_err().field, "target");
        v.target = "parade/protest".into();
        v.validate().unwrap();
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&rec("a", DatasetTag::Geochat, VisualKind::Single, 1)).unwrap();
        let bad = serde_json::to_string(&rec("b", DatasetTag::Geochat, VisualKind::Single, 2)).unwrap();
        std::fs::write(&path, format!("{good}\n\n{{not json\n{bad}\n")).unwrap();
        let DataError::Manifest { errors, .. } = load_manifest(&path, None).unwrap_err() else { panic!() };
        assert_eq!(errors.len(), 2);
        assert_eq!(errors[0].line, 3);
        assert!(matches!(errors[0].kind, LineErrorKind::Parse(_)));
        assert_eq!(errors[1].line, 4);
        assert!(errors[1].to_string().contains("visual_refs"));
        std::fs::write(&path, format!("{good}\n")).unwrap();
        assert_eq!(load_manifest(&path, None).unwrap().len(), 1);
        let DataError::Manifest { errors, .. } = load_manifest(&path, Some(DatasetTag::Era)).unwrap_err() else { panic!() };
        assert!(errors[0].to_string().contains("dataset_tag"));
        assert!(matches!(load_manifest(&dir.path().join("none"), None), Err(DataError::Io { .. })));
    }

    #[test]
    fn mix_preserves_multiset_and_is_seeded() {
        let sets: Vec<Vec<SampleRecord>> = [3, 2, 1]
            .iter()
            .enumerate()
            .map(|(d, &n)| (0..n).map(|i| rec(&format!("d{d}-{i}"), DatasetTag::Geochat, VisualKind::Single, 1)).collect())
            .collect();
        let m = mix(sets.clone(), 4).unwrap();
        assert_eq!(m.len(), 6);
        let ids: HashSet<&str> = m.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(mix(sets, 4).unwrap().order, m.order);
        assert!(mix(vec![vec![], vec![]], 0).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let recs: Vec<_> = (0..100).map(|i| rec(&format!("r{i}"), DatasetTag::Geochat, VisualKind::Single, 1)).collect();
        assert_ne!(mix(vec![recs.clone()], 1).unwrap().order, mix(vec![recs], 2).unwrap().order);
    }

    #[test]
    fn weighted_mix_counts() {
        let a: Vec<_> = (0..4).map(|i| rec(&format!("a{i}"), DatasetTag::Geochat, VisualKind::Single, 1)).collect();
        let b: Vec<_> = (0..10).map(|i| rec(&format!("b{i}"), DatasetTag::Geochat, VisualKind::Single, 1)).collect();
        let m = mix_weighted(vec![a, b], &[2.5, 0.3], 0).unwrap();
        assert_eq!(m.len(), 10 + 3);
    }

    #[test]
    fn split_specs_are_consistent() {
        for s in [SplitSpec::levircc(), SplitSpec::era(), SplitSpec::geochat()] {
            s.check_fractions().unwrap();
            if !s.counts.is_empty() {
                assert_eq!(s.counts.values().sum::<usize>(), s.total);
                for (split, &c) in &s.counts {
                    assert!((c as f64 / s.total as f64 - s.fractions[split]).abs() < 0.005, "{} {split}", s.name);
                }
            }
        }
    }

    #[test]
    fn synthetic_pair_fixture() {
        let s = synth_generate(VisualKind::Pair, 1, 7, &SynthConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        let r = &s[0].record;
        assert_eq!(r.visual_refs.len(), 2);
        assert_eq!(r.references.as_ref().unwrap().len(), 5);
        r.validate().unwrap();
        let again = synth_generate(VisualKind::Pair, 1, 7, &SynthConfig::default()).unwrap();
        assert_eq!(again[0].record, *r);
        assert_eq!(again[0].input, s[0].input);
    }

    #[test]
    fn synthetic_video_shape() {
        let s = synth_generate(VisualKind::Video, 1, 3, &SynthConfig::default()).unwrap();
        assert_eq!(s[0].input.frames(), 4);
        assert!(SYNTH_VIDEO_LABELS.contains(&s[0].record.target.as_str()));
    }

    #[test]
    fn synthetic_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut all = Vec::new();
        for kind in VisualKind::ALL {
            let s = synth_generate(kind, 3, 1, &SynthConfig { test_fraction: 1.0 / 3.0, ..Default::default() }).unwrap();
            all.extend(s);
        }
        let manifest = write_synth(dir.path(), &all).unwrap();
        let loaded = load_manifest(&manifest, None).unwrap();
        assert_eq!(loaded.len(), 9);
        for (r, s) in loaded.iter().zip(&all) {
            assert_eq!(r, &s.record);
            assert_eq!(r.load_visual(dir.path()).unwrap(), s.input);
        }
        let singles: Vec<_> = loaded.iter().filter(|r| r.kind == VisualKind::Single).cloned().collect();
        check_splits(&singles, &SplitSpec::synthetic(VisualKind::Single, 3, 1.0 / 3.0)).unwrap();
    }

    #[test]
    fn no_change_phrases() {
        assert!(SYNTH_UNCHANGED_REFS.iter().all(|c| is_no_change_caption(c)));
        assert!(!SYNTH_CHANGED_REFS.iter().any(|c| is_no_change_caption(c)));
    }
}
