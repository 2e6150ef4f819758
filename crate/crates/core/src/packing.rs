//! Marker tokens and the interleaving of visual embedding blocks with text
//! embeddings into one LM input sequence.

use std::fmt;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::vision::VisualKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("packing: expected {expected} visual units for the marker slots, found {found}")]
    Count { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("packing contract: {0}")]
    Contract(String),
}

type Result<T> = std::result::Result<T, PackError>;

/// A placeholder for one visual unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    Image,
    ChangeFeature,
    /// 1-based frame index.
    Frame(usize),
}

impl Marker {
    pub fn token(&self) -> String {
        match self {
            Marker::Image => "⟨image⟩".to_string(),
            Marker::ChangeFeature => "⟨Change Feature⟩".to_string(),
            Marker::Frame(i) => format!("⟨Frame {i}⟩"),
        }
    }

    /// Inverse of [`Marker::token`].
    pub fn parse(s: &str) -> Option<Marker> {
        match s {
            "⟨image⟩" => Some(Marker::Image),
            "⟨Change Feature⟩" => Some(Marker::ChangeFeature),
            _ => {
                let i: usize = s.strip_prefix("⟨Frame ")?.strip_suffix('⟩')?.parse().ok()?;
                (i >= 1 && s == format!("⟨Frame {i}⟩")).then_some(Marker::Frame(i))
            }
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

/// The markers standing for a `kind` input with `k` frames.
pub fn marker_list(kind: VisualKind, k: usize) -> Result<Vec<Marker>> {
    if !kind.accepts_frames(k) {
        return Err(PackError::Contract(format!("{kind} input cannot have {k} frames")));
    }
    Ok(match kind {
        VisualKind::Single => vec![Marker::Image],
        VisualKind::Pair => vec![Marker::ChangeFeature],
        VisualKind::Video => (1..=k).map(Marker::Frame).collect(),
    })
}

/// Marker fragment as it appears in a rendered prompt.
pub fn markers_for(kind: VisualKind, k: usize) -> Result<String> {
    Ok(marker_list(kind, k)?.iter().map(Marker::token).collect())
}

/// Token ids with the positions of marker tokens. Marker ids stay in
/// `tokens` so that positions are exact; `text_len` excludes them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    tokens: Vec<usize>,
    marker_slots: Vec<(usize, Marker)>,
}

impl TokenizedPrompt {
    pub fn new(tokens: Vec<usize>, marker_slots: Vec<(usize, Marker)>) -> Result<Self> {
        for w in marker_slots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(PackError::Contract(format!(
                    "marker positions must increase, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(p, _)) = marker_slots.iter().find(|(p, _)| *p >= tokens.len()) {
            return Err(PackError::Contract(format!("marker position {p} beyond {} tokens", tokens.len())));
        }
        let frames: Vec<usize> = marker_slots
            .iter()
            .filter_map(|(_, m)| if let Marker::Frame(i) = m { Some(*i) } else { None })
            .collect();
        if frames.iter().enumerate().any(|(j, &i)| i != j + 1) {
            return Err(PackError::Contract(format!("frame markers must be numbered 1, 2, ..., got {frames:?}")));
        }
        Ok(TokenizedPrompt { tokens, marker_slots })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn marker_slots(&self) -> &[(usize, Marker)] {
        &self.marker_slots
    }

    pub fn markers(&self) -> usize {
        self.marker_slots.len()
    }

    pub fn text_len(&self) -> usize {
        self.tokens.len() - self.marker_slots.len()
    }

    /// Ids of the text tokens in order, markers removed.
    pub fn text_tokens(&self) -> Vec<usize> {
        let mut slots = self.marker_slots.iter().map(|(p, _)| *p).peekable();
        let mut out = Vec::with_capacity(self.text_len());
        for (i, &t) in self.tokens.iter().enumerate() {
            if slots.peek() == Some(&i) {
                slots.next();
            } else {
                out.push(t);
            }
        }
        out
    }

    /// Packed row of every text token for blocks of `l_d` rows.
    pub fn text_rows(&self, l_d: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.text_len());
        let mut row = 0;
        let mut slots = self.marker_slots.iter().map(|(p, _)| *p).peekable();
        for i in 0..self.tokens.len() {
            if slots.peek() == Some(&i) {
                slots.next();
                row += l_d;
            } else {
                rows.push(row);
                row += 1;
            }
        }
        rows
    }

    pub fn packed_len(&self, l_d: usize) -> usize {
        self.text_len() + self.markers() * l_d
    }
}

/// Where a packed row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Segment {
    Text { text_index: usize, token: usize },
    Visual { unit: usize, row: usize },
}

impl Segment {
    pub fn is_visual(&self) -> bool {
        matches!(self, Segment::Visual { .. })
    }
}

/// The LM input: `N x D_P` embeddings plus per-row provenance.
#[derive(Debug, Clone)]
pub struct PackedSequence {
    pub embeddings: Tensor,
    pub loss_mask: Vec<bool>,
    pub segment_map: Vec<Segment>,
    pub l_d: usize,
}

/// Substitute each marker slot, in order, by the `l_d` rows of its unit.
pub fn pack(prompt: &TokenizedPrompt, text_embeddings: &Tensor, visuals: &[Tensor], l_d: usize) -> Result<PackedSequence> {
    if visuals.len() != prompt.markers() {
        return Err(PackError::Count { expected: prompt.markers(), found: visuals.len() });
    }
    if text_embeddings.rank() != 2 || text_embeddings.shape()[0] != prompt.text_len() {
        return Err(TensorError::Dimension {
            op: "pack",
            detail: format!("text embeddings {:?} for {} text tokens", text_embeddings.shape(), prompt.text_len()),
        }
        .into());
    }
    let d = text_embeddings.shape()[1];
    for (u, v) in visuals.iter().enumerate() {
        if v.rank() != 2 || v.shape() != [l_d, d] {
            return Err(TensorError::Dimension {
                op: "pack",
                detail: format!("visual unit {u} has shape {:?}, expected [{l_d}, {d}]", v.shape()),
            }
            .into());
        }
    }
    let text_tokens = prompt.text_tokens();
    let n = prompt.packed_len(l_d);
    // Gather from [text rows; unit 0 rows; unit 1 rows; ...].
    let base = prompt.text_len();
    let mut index = Vec::with_capacity(n);
    let mut segment_map = Vec::with_capacity(n);
    let mut text_i = 0;
    let mut unit = 0;
    let mut slots = prompt.marker_slots().iter().map(|(p, _)| *p).peekable();
    for i in 0..prompt.tokens().len() {
        if slots.peek() == Some(&i) {
            slots.next();
            for r in 0..l_d {
                index.push(base + unit * l_d + r);
                segment_map.push(Segment::Visual { unit, row: r });
            }
            unit += 1;
        } else {
            index.push(text_i);
            segment_map.push(Segment::Text { text_index: text_i, token: text_tokens[text_i] });
            text_i += 1;
        }
    }
    let mut parts = Vec::with_capacity(visuals.len() + 1);
    parts.push(text_embeddings.clone());
    parts.extend(visuals.iter().cloned());
    let embeddings = Tensor::concat(&parts, 0)?.gather_rows(&index)?;
    Ok(PackedSequence { embeddings, loss_mask: vec![false; n], segment_map, l_d })
}

/// Mask over packed rows that is true exactly on the text tokens whose text
/// index falls in `answer`.
pub fn supervision_mask(prompt: &TokenizedPrompt, answer: Range<usize>, l_d: usize) -> Result<Vec<bool>> {
    if answer.start > answer.end || answer.end > prompt.text_len() {
        return Err(PackError::Contract(format!(
            "answer span {}..{} outside {} text tokens",
            answer.start,
            answer.end,
            prompt.text_len()
        )));
    }
    let mut mask = vec![false; prompt.packed_len(l_d)];
    let rows = prompt.text_rows(l_d);
    for &r in &rows[answer] {
        mask[r] = true;
    }
    Ok(mask)
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.segment_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_map.is_empty()
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(PackError::Contract(format!("mask of {} rows for {} packed rows", mask.len(), self.len())));
        }
        self.loss_mask = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn visual_rows(&self) -> usize {
        self.segment_map.iter().filter(|s| s.is_visual()).count()
    }

    /// Token id at every row, `fill` on visual rows.
    pub fn row_tokens(&self, fill: usize) -> Vec<usize> {
        self.segment_map
            .iter()
            .map(|s| match s {
                Segment::Text { token, .. } => *token,
                Segment::Visual { .. } => fill,
            })
            .collect()
    }

    /// Check the structural laws: row count, block contiguity, order, and
    /// that no visual row is supervised.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.embeddings.rank() != 2 || self.embeddings.shape()[0] != n || self.loss_mask.len() != n {
            return Err(PackError::Contract(format!(
                "embeddings {:?}, {} mask bits, {} segments",
                self.embeddings.shape(),
                self.loss_mask.len(),
                n
            )));
        }
        let mut next_text = 0;
        let mut next_unit = 0;
        let mut i = 0;
        while i < n {
            match self.segment_map[i] {
                Segment::Text { text_index, .. } => {
                    if text_index != next_text {
                        return Err(PackError::Contract(format!("row {i}: text index {text_index}, expected {next_text}")));
                    }
                    next_text += 1;
                    i += 1;
                }
                Segment::Visual { .. } => {
                    for r in 0..self.l_d {
                        let ok = matches!(self.segment_map.get(i + r), Some(Segment::Visual { unit, row }) if *unit == next_unit && *row == r);
                        if !ok {
                            return Err(PackError::Contract(format!("row {}: broken block for unit {next_unit}", i + r)));
                        }
                        if self.loss_mask[i + r] {
                            return Err(PackError::Contract(format!("row {}: visual row is supervised", i + r)));
                        }
                    }
                    next_unit += 1;
                    i += self.l_d;
                }
            }
        }
        if next_text + next_unit * self.l_d != n {
            return Err(PackError::Contract("row count does not match text and visual blocks".into()));
        }
        Ok(())
    }

    /// One JSON object per row for inspection.
    pub fn debug_dump(&self, token_text: &dyn Fn(usize) -> String) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .segment_map
            .iter()
            .enumerate()
            .map(|(index, s)| match s {
                Segment::Text { text_index, token } => serde_json::json!({
                    "index": index,
                    "source": "text",
                    "text_index": text_index,
                    "token": token,
                    "text": token_text(*token),
                    "supervised": self.loss_mask[index],
                }),
                Segment::Visual { unit, row } => serde_json::json!({
                    "index": index,
                    "source": "visual",
                    "unit": unit,
                    "row": row,
                }),
            })
            .collect();
        serde_json::json!({
            "rows": rows,
            "n": self.len(),
            "text_len": self.len() - self.visual_rows(),
            "units": self.visual_rows() / self.l_d.max(1),
            "l_d": self.l_d,
        })
    }
}
