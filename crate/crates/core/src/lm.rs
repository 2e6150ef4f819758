//! Word-level tokenizer and a small pre-norm causal transformer.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::packing::{Marker, PackError, PackedSequence, TokenizedPrompt};
use crate::param::{uniform, LayerNorm, Linear, Module, Parameter};
use crate::tensor::{Tensor, TensorError};
use crate::vision::{VisualInput, VisualKind};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {n} rows exceeds max_seq {max}")]
    SequenceLength { n: usize, max: usize },
    #[error("lm configuration: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

type Result<T> = std::result::Result<T, LmError>;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "\n";

const PUNCT: &[char] = &['.', ',', '?', ':', ';', '!'];

/// Split text into word-level tokens. Markers and newlines are single
/// tokens and the punctuation marks `. , ? : ; !` stand alone.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '⟨' {
            flush(&mut word, &mut out);
            let mut m = String::from(c);
            for d in chars.by_ref() {
                m.push(d);
                if d == '⟩' {
                    break;
                }
            }
            out.push(m);
        } else if c == '\n' {
            flush(&mut word, &mut out);
            out.push(NEWLINE.to_string());
        } else if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if PUNCT.contains(&c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

fn is_marker_token(t: &str) -> bool {
    t.starts_with('⟨') && t.ends_with('⟩')
}

/// Inverse of [`split_words`] on canonically spaced text.
pub fn join_words<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_ref();
        let glue = match prev {
            None => false,
            Some(p) => {
                let tight_punct = t.chars().count() == 1 && t.chars().all(|c| PUNCT.contains(&c));
                !(tight_punct || t == NEWLINE || p == NEWLINE || (is_marker_token(p) && is_marker_token(t)))
            }
        };
        if glue {
            out.push(' ');
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

/// Token/id bijection. Ids of the specials are fixed: pad 0, bos 1, eos 2,
/// unk 3, newline 4, then the markers, then words in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const NEWLINE_ID: usize = 4;

    fn specials(max_frames: usize) -> Vec<String> {
        let mut s: Vec<String> = [PAD, BOS, EOS, UNK, NEWLINE].iter().map(|t| t.to_string()).collect();
        s.push(Marker::Image.token());
        s.push(Marker::ChangeFeature.token());
        s.extend((1..=max_frames).map(|i| Marker::Frame(i).token()));
        s
    }

    /// Build from a corpus, with frame markers up to `max_frames`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_frames: usize) -> Vocab {
        let specials = Self::specials(max_frames);
        let mut words = BTreeSet::new();
        for text in corpus {
            for w in split_words(text) {
                if !specials.contains(&w) && !is_marker_token(&w) {
                    words.insert(w);
                }
            }
        }
        let mut tokens = specials;
        tokens.extend(words);
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Rebuild from the serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, s) in [PAD, BOS, EOS, UNK, NEWLINE].iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(LmError::Vocab(format!("token {i} must be {s:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LmError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn max_frames(&self) -> usize {
        (1..).take_while(|&i| self.index.contains_key(&Marker::Frame(i).token())).count()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(Self::UNK_ID)).collect()
    }

    /// Text of `ids`, dropping pad, bos and eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| ![Self::PAD_ID, Self::BOS_ID, Self::EOS_ID].contains(&i))
            .map(|&i| self.token(i))
            .collect();
        join_words(&words)
    }

    fn prompt_from_ids(&self, ids: Vec<usize>) -> Result<TokenizedPrompt> {
        let slots = ids
            .iter()
            .enumerate()
            .filter_map(|(p, &i)| Marker::parse(self.token(i)).map(|m| (p, m)))
            .collect();
        Ok(TokenizedPrompt::new(ids, slots)?)
    }

    /// `bos prompt \n`, ready for generation.
    pub fn encode_prompt(&self, prompt: &str) -> Result<TokenizedPrompt> {
        let mut ids = vec![Self::BOS_ID];
        ids.extend(self.encode(prompt));
        ids.push(Self::NEWLINE_ID);
        self.prompt_from_ids(ids)
    }

    /// `bos prompt \n answer eos` and the text-index span of `answer eos`.
    pub fn encode_example(&self, prompt: &str, answer: &str) -> Result<(TokenizedPrompt, Range<usize>)> {
        let p = self.encode_prompt(prompt)?;
        let mut ids = p.tokens().to_vec();
        let start = p.text_len();
        ids.extend(self.encode(answer));
        ids.push(Self::EOS_ID);
        let tp = self.prompt_from_ids(ids)?;
        let end = tp.text_len();
        Ok((tp, start..end))
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_p: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { d_p: 64, layers: 2, heads: 4, max_seq: 512, vocab_size: 0, seed: 0 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_p == 0 || self.heads == 0 || !self.d_p.is_multiple_of(self.heads) {
            return Err(LmError::Config(format!("d_p {} must be a positive multiple of heads {}", self.d_p, self.heads)));
        }
        if self.max_seq == 0 || self.vocab_size == 0 {
            return Err(LmError::Config("max_seq and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d)?,
            wq: Linear::new(&format!("{name}.attn.wq"), d, d, rng)?,
            wk: Linear::new(&format!("{name}.attn.wk"), d, d, rng)?,
            wv: Linear::new(&format!("{name}.attn.wv"), d, d, rng)?,
            wo: Linear::new(&format!("{name}.attn.wo"), d, d, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d)?,
            fc1: Linear::new(&format!("{name}.mlp.fc1"), d, 4 * d, rng)?,
            fc2: Linear::new(&format!("{name}.mlp.fc2"), 4 * d, d, rng)?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.shape()[1];
        let dh = d / self.heads;
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads = (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * dh, dh)?;
                let kh = k.narrow(1, h * dh, dh)?;
                let vh = v.narrow(1, h * dh, dh)?;
                qh.matmul(&kh.transpose()?)?.scale(scale).causal_softmax()?.matmul(&vh)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.wo.forward(&Tensor::concat(&heads, 1)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attention(&self.ln1.forward(x)?)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.relu())?;
        Ok(x.add(&m)?)
    }
}

impl Module for Block {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.ln1.parameters();
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(l.parameters());
        }
        v.extend(self.ln2.parameters());
        v.extend(self.fc1.parameters());
        v.extend(self.fc2.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.parameters_mut();
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            v.extend(l.parameters_mut());
        }
        v.extend(self.ln2.parameters_mut());
        v.extend(self.fc1.parameters_mut());
        v.extend(self.fc2.parameters_mut());
        v
    }
}

/// Token and learned position embeddings, pre-norm blocks, final norm and
/// an untied output head. Parameters are named under `prefix` ("lm" for the
/// main model).
#[derive(Debug, Clone)]
pub struct CausalLm {
    pub config: LmConfig,
    pub tok_emb: Parameter,
    pub pos_emb: Parameter,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl CausalLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        Self::with_prefix("lm", config)
    }

    pub fn with_prefix(prefix: &str, config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_p;
        let tok_emb = Parameter::new(format!("{prefix}.tok_emb"), uniform(&mut rng, config.vocab_size * d, 0.5), &[config.vocab_size, d])?;
        let pos_emb = Parameter::new(format!("{prefix}.pos_emb"), uniform(&mut rng, config.max_seq * d, 0.1), &[config.max_seq, d])?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&format!("{prefix}.blocks.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CausalLm {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(&format!("{prefix}.ln_f"), d)?,
            head: Linear::new(&format!("{prefix}.head"), d, config.vocab_size, &mut rng)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// `n x D_P` embeddings of token ids.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size()) {
            return Err(LmError::Vocab(format!("token id {bad} outside vocabulary of {}", self.vocab_size())));
        }
        Ok(self.tok_emb.tensor().gather_rows(ids)?)
    }

    /// Embeddings of the text tokens of a prompt, markers skipped.
    pub fn embed_prompt_text(&self, prompt: &TokenizedPrompt) -> Result<Tensor> {
        self.embed_tokens(&prompt.text_tokens())
    }

    /// Normalized final hidden states, `N x D_P`.
    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        if n > self.config.max_seq {
            return Err(LmError::SequenceLength { n, max: self.config.max_seq });
        }
        let mut h = x.add(&self.pos_emb.tensor().narrow(0, 0, n)?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(self.ln_f.forward(&h)?)
    }

    /// Logits for every row, `N x |V|`.
    pub fn forward(&self, packed: &PackedSequence) -> Result<Tensor> {
        self.forward_embeddings(&packed.embeddings)
    }

    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.hidden(x)?)?)
    }

    /// Logits for the listed rows only.
    pub fn forward_rows(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
        Ok(self.head.forward(&self.hidden(x)?.gather_rows(rows)?)?)
    }

    /// Greedy continuation of `prefix`, stopping at eos, after `max_new`
    /// tokens or when the sequence is full.
    pub fn generate(&self, prefix: &PackedSequence, max_new: usize) -> Result<Vec<usize>> {
        let mut x = prefix.embeddings.detach();
        let mut out = Vec::new();
        while out.len() < max_new {
            let n = x.shape()[0];
            let logits = self.forward_rows(&x, &[n - 1])?;
            let next = argmax(logits.data());
            if next == Vocab::EOS_ID {
                break;
            }
            out.push(next);
            if n == self.config.max_seq {
                break;
            }
            x = Tensor::concat(&[x, self.embed_tokens(&[next])?.detach()], 0)?;
        }
        Ok(out)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Module for CausalLm {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.parameters());
        }
        v.extend(self.ln_f.parameters());
        v.extend(self.head.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.parameters_mut());
        }
        v.extend(self.ln_f.parameters_mut());
        v.extend(self.head.parameters_mut());
        v
    }
}

/// SHA-256 over kind, frame count, size and pixel bytes.
pub fn content_hash(input: &VisualInput) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(input.kind().as_str().as_bytes());
    for v in [input.frames(), input.height(), input.width()] {
        h.update((v as u64).to_le_bytes());
    }
    for p in input.pixels() {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

pub fn content_hash_hex(input: &VisualInput) -> String {
    content_hash(input).iter().map(|b| format!("{b:02x}")).collect()
}

const SINGLE_CLUES: &[&str] = &[
    "the image shows a few shapes on a plain background",
    "the scene contains a bright object near the center",
    "there are several colored regions in the image",
    "the image shows an open area with little structure",
];

const PAIR_CLUES: &[&str] = &[
    "the two images look almost the same",
    "some buildings appear along the road",
    "a new structure may have been built",
    "there is no clear difference between the images",
    "a small area of the scene seems to change",
];

const VIDEO_CLUES: &[&str] = &[
    "an object moves across the frames",
    "the video shows a small bright object",
    "the scene is captured from above",
];

pub fn clue_table(kind: VisualKind) -> &'static [&'static str] {
    match kind {
        VisualKind::Single => SINGLE_CLUES,
        VisualKind::Pair => PAIR_CLUES,
        VisualKind::Video => VIDEO_CLUES,
    }
}

/// Table entry for a hash value: `hash mod table size`.
pub fn clue_for_hash(kind: VisualKind, hash: u64) -> &'static str {
    let t = clue_table(kind);
    t[(hash % t.len() as u64) as usize]
}

/// Canned clue for an input, keyed by the first 8 bytes (little endian) of
/// its content hash. The generation prompt does not change the choice.
pub fn stub_clue(input: &VisualInput, _p_g: &str) -> String {
    let h = content_hash(input);
    let key = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
    clue_for_hash(input.kind(), key).to_string()
}
