//! The assembled model: encoder, change extractor, projector and LM, plus
//! the record-to-sequence plumbing shared by training and inference.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::{ChangeExtractor, DualTimeFeatures};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{DatasetTag, SampleRecord, SYNTH_CHANGED_REFS, SYNTH_UNCHANGED_REFS, SYNTH_VIDEO_LABELS};
use crate::lm::{clue_table, CausalLm, LmConfig, LmError, Vocab};
use crate::packing::{marker_list, pack, supervision_mask, Marker, PackError, PackedSequence, TokenizedPrompt};
use crate::param::{Module, Parameter};
use crate::prompt::{self, FullPrompt, PromptError, TaskTag};
use crate::tensor::{Tensor, TensorError};
use crate::vision::{PatchLinearEncoder, Projector, VisionError, VisualEncoder, VisualInput, VisualKind};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model bundle: {0}")]
    Io(String),
    #[error("model configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Prefixes frozen during joint tuning.
pub const JOINT_FREEZE: [&str; 3] = ["encoder.", "change.", "projector."];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    /// Frames sampled from each video.
    pub frames: usize,
    pub seed: u64,
    /// Route pairs through the change extractor; otherwise both frames are
    /// packed as separate units.
    pub change_extraction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            patch: 4,
            d_v: 16,
            d_p: 64,
            layers: 2,
            heads: 4,
            max_seq: 512,
            frames: 4,
            seed: 0,
            change_extraction: true,
        }
    }
}

impl ModelConfig {
    /// Rows per visual unit after the 2x2 downsample.
    pub fn l_d(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) || !(self.image_size / self.patch).is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "image size {} must split into an even grid of {}-pixel patches",
                self.image_size, self.patch
            )));
        }
        if self.frames == 0 || self.d_v == 0 {
            return Err(ModelError::Config("frames and d_v must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub encoder: PatchLinearEncoder,
    pub change: ChangeExtractor,
    pub projector: Projector,
    pub lm: CausalLm,
}

/// Everything the tokenizer should know about for the toy datasets, plus
/// the texts passed in.
pub fn vocab_corpus<'a>(extra: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut texts: Vec<String> = extra.into_iter().map(str::to_string).collect();
    for kind in VisualKind::ALL {
        texts.push(TaskTag::for_kind(kind).as_str().to_string());
        texts.push(prompt::clue_prompt_for(kind).to_string());
        texts.extend(clue_table(kind).iter().map(|s| s.to_string()));
    }
    texts.extend(SYNTH_CHANGED_REFS.iter().chain(&SYNTH_UNCHANGED_REFS).chain(&SYNTH_VIDEO_LABELS).map(|s| s.to_string()));
    texts.push(crate::data::synth_video_instruction());
    texts.push("Clue:".into());
    texts
}

/// Vocabulary covering the records' instructions, targets and references.
pub fn build_vocab(records: &[SampleRecord], max_frames: usize) -> Vocab {
    let mut texts = Vec::new();
    for r in records {
        texts.push(r.instruction.clone());
        texts.push(r.target.clone());
        if let Some(refs) = &r.references {
            texts.extend(refs.iter().cloned());
        }
        if let Ok(i) = prompt::instruction_for_dataset(r.dataset_tag, r) {
            texts.push(i);
        }
    }
    let corpus = vocab_corpus(texts.iter().map(String::as_str));
    Vocab::build(corpus.iter().map(String::as_str), max_frames.max(2))
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vocab,
}

/// `model.ckpt` -> `model.meta.json`.
pub fn meta_path(checkpoint: &std::path::Path) -> std::path::PathBuf {
    checkpoint.with_extension("meta.json")
}

/// A tokenized training example and its visual input.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: TokenizedPrompt,
    pub answer: Range<usize>,
    pub input: VisualInput,
    /// Visual units computed once when the visual side is frozen.
    pub units: Option<Vec<Tensor>>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let lm_cfg = LmConfig {
            d_p: config.d_p,
            layers: config.layers,
            heads: config.heads,
            max_seq: config.max_seq,
            vocab_size: vocab.len(),
            seed: config.seed.wrapping_add(3),
        };
        Ok(Model {
            config,
            encoder: PatchLinearEncoder::new(config.patch, config.d_v, config.seed)?,
            change: ChangeExtractor::new(config.d_v, config.seed.wrapping_add(1))?,
            projector: Projector::new(config.d_v, config.d_p, config.seed.wrapping_add(2))?,
            lm: CausalLm::new(lm_cfg)?,
            vocab,
        })
    }

    pub fn l_d(&self) -> usize {
        self.config.l_d()
    }

    /// Markers of an input as packed by this model.
    pub fn markers(&self, kind: VisualKind, k: usize) -> Result<Vec<Marker>> {
        let k = if kind == VisualKind::Video { k.min(self.config.frames) } else { k };
        if kind == VisualKind::Pair && !self.config.change_extraction {
            return Ok(vec![Marker::Frame(1), Marker::Frame(2)]);
        }
        Ok(marker_list(kind, k)?)
    }

    /// Rendered prompt for a record.
    pub fn prompt_text(&self, record: &SampleRecord, input: &VisualInput, clue: Option<&str>) -> Result<String> {
        let instruction = prompt::instruction_for_dataset(record.dataset_tag, record)?;
        let markers = self.markers(input.kind(), input.frames())?;
        Ok(FullPrompt::with_markers(markers, TaskTag::for_kind(input.kind()), &instruction, clue)?.render())
    }

    /// Visual units, one `L_d x D_P` block per marker.
    pub fn visual_units(&self, input: &VisualInput) -> Result<Vec<Tensor>> {
        let input = match input.kind() {
            VisualKind::Video => input.sample_frames(self.config.frames)?,
            _ => input.clone(),
        };
        let features = self.encoder.encode(&input)?;
        let emb = if input.kind() == VisualKind::Pair && self.config.change_extraction {
            let map = self.change.forward(&DualTimeFeatures::from_features(&features)?)?;
            self.projector.embed_change(&map)?
        } else {
            self.projector.embed_features(&features)?
        };
        Ok(emb.split()?)
    }

    pub fn visual_side_frozen(&self) -> bool {
        self.encoder.parameters().iter().chain(self.change.parameters().iter()).chain(self.projector.parameters().iter()).all(|p| p.is_frozen())
    }

    pub fn example(&self, record: &SampleRecord, input: VisualInput, clue: Option<&str>, answer: &str) -> Result<Example> {
        let text = self.prompt_text(record, &input, clue)?;
        let (tokens, span) = self.vocab.encode_example(&text, answer)?;
        let units = if self.visual_side_frozen() { Some(self.visual_units(&input)?) } else { None };
        Ok(Example { tokens, answer: span, input, units })
    }

    /// Pack an example with its answer supervised.
    pub fn pack_example(&self, ex: &Example) -> Result<PackedSequence> {
        let units = match &ex.units {
            Some(u) => u.clone(),
            None => self.visual_units(&ex.input)?,
        };
        let text = self.lm.embed_prompt_text(&ex.tokens)?;
        let packed = pack(&ex.tokens, &text, &units, self.l_d())?;
        let mask = supervision_mask(&ex.tokens, ex.answer.clone(), self.l_d())?;
        Ok(packed.with_mask(mask)?)
    }

    /// Mean next-token cross-entropy over the answer tokens of one example.
    pub fn example_loss(&self, ex: &Example) -> Result<Tensor> {
        let packed = self.pack_example(ex)?;
        Ok(sequence_loss(&self.lm, &packed)?)
    }

    /// Greedy answer for an input.
    pub fn predict(&self, record: &SampleRecord, input: &VisualInput, clue: Option<&str>, max_new: usize) -> Result<String> {
        let text = self.prompt_text(record, input, clue)?;
        let tokens = self.vocab.encode_prompt(&text)?;
        let units = self.visual_units(input)?;
        let emb = self.lm.embed_prompt_text(&tokens)?;
        let packed = pack(&tokens, &emb, &units, self.l_d())?;
        let ids = self.lm.generate(&packed, max_new)?;
        Ok(self.vocab.decode(&ids))
    }

    pub fn freeze_for_joint_tuning(&mut self) {
        let p: Vec<String> = JOINT_FREEZE.iter().map(|s| s.to_string()).collect();
        self.freeze_prefixes(&p, true);
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(checkpoint::save(self, path)?)
    }

    /// Write the checkpoint and its sidecar holding config and vocab.
    pub fn save_bundle(&self, path: &std::path::Path) -> Result<()> {
        self.save(path)?;
        let meta = ModelMeta { config: self.config, vocab: self.vocab.clone() };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(meta_path(path), json + "\n").map_err(|e| ModelError::Io(e.to_string()))
    }

    /// Rebuild a model written by [`Model::save_bundle`].
    pub fn load_bundle(path: &std::path::Path) -> Result<Model> {
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| ModelError::Io(format!("{}: {e}", mp.display())))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| ModelError::Io(format!("{}: {e}", mp.display())))?;
        let mut m = Model::new(meta.config, meta.vocab)?;
        m.load_params(path, "")?;
        Ok(m)
    }

    /// Restore every parameter under `prefix` from a checkpoint file.
    pub fn load_params(&mut self, path: &std::path::Path, prefix: &str) -> Result<usize> {
        let records = checkpoint::load(path)?;
        Ok(checkpoint::restore(self, &records, prefix)?)
    }
}

impl Module for Model {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.parameters();
        v.extend(self.change.parameters());
        v.extend(self.projector.parameters());
        v.extend(self.lm.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.parameters_mut();
        v.extend(self.change.parameters_mut());
        v.extend(self.projector.parameters_mut());
        v.extend(self.lm.parameters_mut());
        v
    }
}

/// Rows `i - 1` predicting the token at every supervised row `i`, and those
/// target ids.
pub fn shifted_targets(packed: &PackedSequence) -> std::result::Result<(Vec<usize>, Vec<usize>), TensorError> {
    let tokens = packed.row_tokens(Vocab::PAD_ID);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &m) in packed.loss_mask.iter().enumerate() {
        if m {
            if i == 0 {
                return Err(crate::tensor::contract_err("loss", "row 0 has no predecessor to predict it"));
            }
            rows.push(i - 1);
            targets.push(tokens[i]);
        }
    }
    if rows.is_empty() {
        return Err(crate::tensor::contract_err("loss", "mask selects no positions"));
    }
    Ok((rows, targets))
}

/// Next-token loss of `lm` on a masked packed sequence, computing logits
/// only where they are needed.
pub fn sequence_loss(lm: &CausalLm, packed: &PackedSequence) -> std::result::Result<Tensor, LmError> {
    let (rows, targets) = shifted_targets(packed)?;
    let logits = lm.forward_rows(&packed.embeddings, &rows)?;
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    Ok(logits.weighted_nll(&targets, &w)?)
}

/// Whether a record's dataset is change captioning.
pub fn is_caption_task(tag: DatasetTag) -> bool {
    tag.kind() == VisualKind::Pair
}
