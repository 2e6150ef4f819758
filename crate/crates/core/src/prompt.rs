//! Task tags, instructions, clue prompts and the prompt template.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetTag, SampleRecord, ERA_LABELS};
use crate::packing::{marker_list, Marker, PackError};
use crate::vision::{VisualInput, VisualKind};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("clue cache {path}: {detail}")]
    Cache { path: String, detail: String },
}

type Result<T> = std::result::Result<T, PromptError>;

pub const SINGLE_CLUE_PROMPT: &str = "Describe this remote sensing image in detail.";
pub const PAIR_CLUE_PROMPT: &str = "Please identify whether there are obvious remote sensing image changes.";
pub const VIDEO_CLUE_PROMPT: &str = "Please classify the scene in this video captured by the UAV.";

pub const LEVIRCC_INSTRUCTION: &str = "Please identify whether there are obvious remote sensing image changes.";
pub const CLASS_LIST_PREFIX: &str = "Classify the given video in one of the following classes. Classes: ";

/// Fixed prompt that asks the base model for a clue about a `kind` input.
pub fn clue_prompt_for(kind: VisualKind) -> &'static str {
    match kind {
        VisualKind::Single => SINGLE_CLUE_PROMPT,
        VisualKind::Pair => PAIR_CLUE_PROMPT,
        VisualKind::Video => VIDEO_CLUE_PROMPT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskTag {
    SingleImage,
    ChangeCaptioning,
    VideoClassification,
}

impl TaskTag {
    pub fn for_kind(kind: VisualKind) -> TaskTag {
        match kind {
            VisualKind::Single => TaskTag::SingleImage,
            VisualKind::Pair => TaskTag::ChangeCaptioning,
            VisualKind::Video => TaskTag::VideoClassification,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::SingleImage => "Single image understanding:",
            TaskTag::ChangeCaptioning => "Remote sensing change captioning:",
            TaskTag::VideoClassification => "Video scene classification:",
        }
    }
}

/// The four prompt components before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPrompt {
    pub markers: Vec<Marker>,
    pub tag: TaskTag,
    pub instruction: String,
    pub clue: Option<String>,
}

impl FullPrompt {
    /// An empty clue counts as no clue.
    pub fn new(kind: VisualKind, k: usize, instruction: &str, clue: Option<&str>) -> Result<Self> {
        Self::with_markers(marker_list(kind, k)?, TaskTag::for_kind(kind), instruction, clue)
    }

    pub fn with_markers(markers: Vec<Marker>, tag: TaskTag, instruction: &str, clue: Option<&str>) -> Result<Self> {
        if instruction.trim().is_empty() {
            return Err(PromptError::Contract("instruction must be nonempty".into()));
        }
        Ok(FullPrompt {
            markers,
            tag,
            instruction: instruction.to_string(),
            clue: clue.filter(|c| !c.trim().is_empty()).map(str::to_string),
        })
    }

    /// `markers \n tag instruction[ Clue: clue]`
    pub fn render(&self) -> String {
        let mut s: String = self.markers.iter().map(Marker::token).collect();
        s.push('\n');
        s.push_str(self.tag.as_str());
        s.push(' ');
        s.push_str(&self.instruction);
        if let Some(c) = &self.clue {
            s.push_str(" Clue: ");
            s.push_str(c);
        }
        s
    }
}

pub fn build_prompt(kind: VisualKind, k: usize, instruction: &str, clue: Option<&str>) -> Result<String> {
    Ok(FullPrompt::new(kind, k, instruction, clue)?.render())
}

/// Capitalized labels in alphabetical order after the class-list preamble.
pub fn class_list_instruction(labels: &[&str]) -> String {
    let mut names: Vec<String> = labels
        .iter()
        .map(|l| {
            let mut c = l.chars();
            c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
        })
        .collect();
    names.sort();
    format!("{CLASS_LIST_PREFIX}{}", names.join(", "))
}

pub fn era_instruction() -> String {
    class_list_instruction(&ERA_LABELS)
}

/// Instruction `P_t` for a record of `tag`. Instruction-tuning datasets keep
/// their own; the change and video datasets get fixed ones.
pub fn instruction_for_dataset(tag: DatasetTag, record: &SampleRecord) -> Result<String> {
    let own = || {
        if record.instruction.trim().is_empty() {
            Err(PromptError::Contract(format!("record {} has no instruction", record.id)))
        } else {
            Ok(record.instruction.clone())
        }
    };
    match tag {
        DatasetTag::Geochat | DatasetTag::Synthetic(VisualKind::Single) => own(),
        DatasetTag::Levircc | DatasetTag::Synthetic(VisualKind::Pair) => Ok(LEVIRCC_INSTRUCTION.to_string()),
        DatasetTag::Era => Ok(era_instruction()),
        DatasetTag::Synthetic(VisualKind::Video) => Ok(crate::data::synth_video_instruction()),
    }
}

/// Parses a dataset tag string and resolves its instruction.
pub fn instruction_for_tag_str(tag: &str, record: &SampleRecord) -> Result<String> {
    let t: DatasetTag = tag.parse().map_err(PromptError::Contract)?;
    instruction_for_dataset(t, record)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("clue unavailable: {0}")]
pub struct ClueUnavailable(pub String);

/// Produces a clue for an input under a generation prompt.
pub trait ClueGenerator: Send + Sync {
    fn generate(&self, input: &VisualInput, p_g: &str) -> std::result::Result<String, ClueUnavailable>;
}

/// Canned clues keyed by a content hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubClueGenerator;

impl ClueGenerator for StubClueGenerator {
    fn generate(&self, input: &VisualInput, p_g: &str) -> std::result::Result<String, ClueUnavailable> {
        Ok(crate::lm::stub_clue(input, p_g))
    }
}

/// Clue for `input` under the fixed prompt of its kind.
pub fn generate_clue(gen: &dyn ClueGenerator, input: &VisualInput) -> std::result::Result<String, ClueUnavailable> {
    gen.generate(input, clue_prompt_for(input.kind()))
}

/// Clue or `None`; failures and empty clues both mean "no clue".
pub fn clue_or_none(gen: &dyn ClueGenerator, input: &VisualInput) -> Option<String> {
    match generate_clue(gen, input) {
        Ok(c) if !c.trim().is_empty() => Some(c),
        Ok(_) => None,
        Err(e) => {
            log::warn!("{e}; building the prompt without a clue");
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClueEntry {
    pub input_hash: String,
    pub p_g: String,
    pub clue: String,
}

/// Clue memo keyed by (input hash, generation prompt). Concurrent readers
/// and writers are fine; the last insert for a key wins.
#[derive(Debug, Default)]
pub struct ClueCache {
    map: RwLock<HashMap<(String, String), String>>,
}

impl ClueCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, input_hash: &str, p_g: &str) -> Option<String> {
        self.map.read().expect("cache lock").get(&(input_hash.to_string(), p_g.to_string())).cloned()
    }

    pub fn insert(&self, input_hash: &str, p_g: &str, clue: &str) {
        self.map.write().expect("cache lock").insert((input_hash.to_string(), p_g.to_string()), clue.to_string());
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached clue, generating and storing it on a miss. Failures are not
    /// cached.
    pub fn clue(&self, gen: &dyn ClueGenerator, input: &VisualInput) -> std::result::Result<String, ClueUnavailable> {
        let h = crate::lm::content_hash_hex(input);
        let p_g = clue_prompt_for(input.kind());
        if let Some(c) = self.get(&h, p_g) {
            return Ok(c);
        }
        let c = gen.generate(input, p_g)?;
        self.insert(&h, p_g, &c);
        Ok(c)
    }

    /// Entries sorted by key so the file is reproducible.
    pub fn entries(&self) -> Vec<ClueEntry> {
        let map = self.map.read().expect("cache lock");
        let mut v: Vec<ClueEntry> = map
            .iter()
            .map(|((h, p), c)| ClueEntry { input_hash: h.clone(), p_g: p.clone(), clue: c.clone() })
            .collect();
        v.sort_by(|a, b| (&a.input_hash, &a.p_g).cmp(&(&b.input_hash, &b.p_g)));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| PromptError::Cache { path: path.display().to_string(), detail: e.to_string() })
    }

    /// Later lines override earlier ones.
    pub fn load(path: &Path) -> Result<Self> {
        let cerr = |detail: String| PromptError::Cache { path: path.display().to_string(), detail };
        let text = std::fs::read_to_string(path).map_err(|e| cerr(e.to_string()))?;
        let cache = ClueCache::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ClueEntry = serde_json::from_str(line).map_err(|e| cerr(format!("line {}: {e}", i + 1)))?;
            cache.insert(&e.input_hash, &e.p_g, &e.clue);
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Failing;
    impl ClueGenerator for Failing {
        fn generate(&self, _: &VisualInput, _: &str) -> std::result::Result<String, ClueUnavailable> {
            Err(ClueUnavailable("offline".into()))
        }
    }

    #[test]
    fn clue_prompts_are_exact() {
        assert_eq!(clue_prompt_for(VisualKind::Single), "Describe this remote sensing image in detail.");
        assert_eq!(
            clue_prompt_for(VisualKind::Pair),
            "Please identify whether there are obvious remote sensing image changes."
        );
        assert_eq!(clue_prompt_for(VisualKind::Video), "Please classify the scene in this video captured by the UAV.");
    }

    #[test]
    fn rendering_examples() {
        assert_eq!(
            build_prompt(VisualKind::Single, 1, "Is there a road?", None).unwrap(),
            "⟨image⟩\nSingle image understanding: Is there a road?"
        );
        assert_eq!(
            build_prompt(VisualKind::Pair, 2, LEVIRCC_INSTRUCTION, Some("c")).unwrap(),
            "⟨Change Feature⟩\nRemote sensing change captioning: Please identify whether there are obvious remote sensing image changes. Clue: c"
        );
        let v = build_prompt(VisualKind::Video, 2, "Classify.", None).unwrap();
        assert!(v.starts_with("⟨Frame 1⟩⟨Frame 2⟩\nVideo scene classification: "));
        assert!(build_prompt(VisualKind::Single, 1, "  ", None).is_err());
        assert_eq!(build_prompt(VisualKind::Single, 1, "Q", Some("")).unwrap(), build_prompt(VisualKind::Single, 1, "Q", None).unwrap());
    }

    #[test]
    fn era_instruction_lists_all_labels() {
        let s = era_instruction();
        assert!(s.starts_with("Classify the given video in one of the following classes. Classes: Baseball, Basketball, "));
        assert_eq!(s.strip_prefix(CLASS_LIST_PREFIX).unwrap().split(", ").count(), 25);
        assert!(s.contains("Parade/protest") && s.ends_with("Traffic congestion"));
    }

    #[test]
    fn dataset_instructions() {
        let mut r = SampleRecord {
            id: "x".into(),
            dataset_tag: DatasetTag::Geochat,
            kind: VisualKind::Single,
            visual_refs: vec!["a".into()],
            instruction: "Is there a water area? Answer in one word or a short phrase.".into(),
            target: "yes".into(),
            references: None,
            split: None,
            category: None,
        };
        assert_eq!(instruction_for_dataset(DatasetTag::Geochat, &r).unwrap(), r.instruction);
        assert_eq!(instruction_for_dataset(DatasetTag::Levircc, &r).unwrap(), LEVIRCC_INSTRUCTION);
        assert!(instruction_for_dataset(DatasetTag::Era, &r).unwrap().starts_with(CLASS_LIST_PREFIX));
        assert!(instruction_for_tag_str("rsicd", &r).is_err());
        r.instruction.clear();
        assert!(instruction_for_dataset(DatasetTag::Geochat, &r).is_err());
    }

    #[test]
    fn failing_generator_degrades() {
        let input = VisualInput::new(VisualKind::Single, 1, 2, 2, vec![0.1; 12]).unwrap();
        assert_eq!(clue_or_none(&Failing, &input), None);
        assert!(clue_or_none(&StubClueGenerator, &input).is_some());
    }

    #[test]
    fn cache_round_trip_and_last_write_wins() {
        let input = VisualInput::new(VisualKind::Pair, 2, 2, 2, vec![0.3; 24]).unwrap();
        let cache = ClueCache::new();
        let c = cache.clue(&StubClueGenerator, &input).unwrap();
        assert_eq!(cache.len(), 1);
        let h = crate::lm::content_hash_hex(&input);
        cache.insert(&h, PAIR_CLUE_PROMPT, "override");
        assert_eq!(cache.clue(&Failing, &input).unwrap(), "override");
        assert_ne!(c, "override");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clues.jsonl");
        cache.save(&p).unwrap();
        let back = ClueCache::load(&p).unwrap();
        assert_eq!(back.entries(), cache.entries());
    }

    #[test]
    fn cache_is_shareable_across_threads() {
        let cache = std::sync::Arc::new(ClueCache::new());
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let c = cache.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        c.insert(&format!("h{i}"), "p", &format!("t{t}"));
                        assert!(c.get(&format!("h{i}"), "p").is_some());
                    }
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(cache.len(), 50);
    }
}
