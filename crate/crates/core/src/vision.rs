//! Visual inputs, the patch-linear stub encoder and the multimodal projector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::ChangeFeatureMap;
use crate::param::{Linear, Module, Parameter};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("vision configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pixel file {path}: {detail}")]
    Pixels { path: String, detail: String },
}

type Result<T> = std::result::Result<T, VisionError>;

/// The three task shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualKind {
    Single,
    Pair,
    Video,
}

impl VisualKind {
    pub const ALL: [VisualKind; 3] = [VisualKind::Single, VisualKind::Pair, VisualKind::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            VisualKind::Single => "single",
            VisualKind::Pair => "pair",
            VisualKind::Video => "video",
        }
    }

    /// Whether `k` frames is a legal count for this kind.
    pub fn accepts_frames(self, k: usize) -> bool {
        match self {
            VisualKind::Single => k == 1,
            VisualKind::Pair => k == 2,
            VisualKind::Video => k >= 1,
        }
    }
}

impl fmt::Display for VisualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VisualKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(VisualKind::Single),
            "pair" => Ok(VisualKind::Pair),
            "video" => Ok(VisualKind::Video),
            other => Err(format!("unknown visual kind {other:?} (expected single, pair or video)")),
        }
    }
}

/// `k x 3 x h x w` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    kind: VisualKind,
    k: usize,
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl VisualInput {
    pub const CHANNELS: usize = 3;

    pub fn new(kind: VisualKind, k: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if !kind.accepts_frames(k) {
            return Err(VisionError::Config(format!("{kind} input cannot have {k} frames")));
        }
        if h == 0 || w == 0 || pixels.len() != k * Self::CHANNELS * h * w {
            return Err(VisionError::Config(format!(
                "{} pixel values do not form {k} x 3 x {h} x {w}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VisionError::Config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(VisualInput { kind, k, h, w, pixels })
    }

    /// Stack single frames in temporal order.
    pub fn from_frames(kind: VisualKind, frames: &[VisualInput]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| VisionError::Config("no frames".into()))?;
        let mut pixels = Vec::new();
        let mut k = 0;
        for f in frames {
            if (f.h, f.w) != (first.h, first.w) {
                return Err(VisionError::Config(format!(
                    "frame size {}x{} differs from {}x{}",
                    f.h, f.w, first.h, first.w
                )));
            }
            pixels.extend_from_slice(&f.pixels);
            k += f.k;
        }
        Self::new(kind, k, first.h, first.w, pixels)
    }

    pub fn kind(&self) -> VisualKind {
        self.kind
    }
    pub fn frames(&self) -> usize {
        self.k
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = Self::CHANNELS * self.h * self.w;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Uniform temporal sampling down to at most `k` frames; frame `i` of the
    /// result is source frame `floor(i * n / k)`.
    pub fn sample_frames(&self, k: usize) -> Result<VisualInput> {
        if k == 0 {
            return Err(VisionError::Config("cannot sample zero frames".into()));
        }
        if self.k <= k {
            return Ok(self.clone());
        }
        let pixels = (0..k).flat_map(|i| self.frame(i * self.k / k).iter().copied()).collect();
        Self::new(self.kind, k, self.h, self.w, pixels)
    }

    /// Raw little-endian `f64` payload plus a JSON sidecar with the extents.
    pub fn write_files(&self, payload: &Path) -> std::io::Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(payload, bytes)?;
        let meta = PixelMeta { k: self.k, c: Self::CHANNELS, h: self.h, w: self.w };
        std::fs::write(sidecar_path(payload), serde_json::to_vec(&meta).expect("meta serializes"))
    }

    pub fn read_files(payload: &Path, kind: VisualKind) -> Result<VisualInput> {
        let perr = |detail: String| VisionError::Pixels { path: payload.display().to_string(), detail };
        let meta_raw = std::fs::read(sidecar_path(payload)).map_err(|e| perr(format!("sidecar: {e}")))?;
        let meta: PixelMeta = serde_json::from_slice(&meta_raw).map_err(|e| perr(format!("sidecar: {e}")))?;
        if meta.c != Self::CHANNELS {
            return Err(perr(format!("expected 3 channels, sidecar says {}", meta.c)));
        }
        let bytes = std::fs::read(payload).map_err(|e| perr(e.to_string()))?;
        if bytes.len() != meta.k * meta.c * meta.h * meta.w * 8 {
            return Err(perr(format!("{} bytes do not match sidecar extents", bytes.len())));
        }
        let pixels = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        VisualInput::new(kind, meta.k, meta.h, meta.w, pixels)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PixelMeta {
    k: usize,
    c: usize,
    h: usize,
    w: usize,
}

pub fn sidecar_path(payload: &Path) -> std::path::PathBuf {
    payload.with_extension("json")
}

/// Patch grid `(rows, cols)` of an encoded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-frame `L_V x D_V` patch features.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub per_frame: Vec<Tensor>,
    pub grid: Grid,
}

impl VisualFeatures {
    pub fn depth(&self) -> usize {
        self.per_frame[0].shape()[1]
    }
}

/// Any image encoder producing row-major patch features.
pub trait VisualEncoder {
    fn patch_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn encode(&self, input: &VisualInput) -> Result<VisualFeatures>;
}

/// Patchify then one linear map from `3 * d_p^2` to `D_V`.
#[derive(Debug, Clone)]
pub struct PatchLinearEncoder {
    patch: usize,
    pub proj: Linear,
}

impl PatchLinearEncoder {
    pub fn new(patch: usize, d_v: usize, seed: u64) -> Result<Self> {
        if patch == 0 || d_v == 0 {
            return Err(VisionError::Config("patch size and feature depth must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Linear::new("encoder.proj", VisualInput::CHANNELS * patch * patch, d_v, &mut rng)?;
        Ok(PatchLinearEncoder { patch, proj })
    }

    pub fn grid_for(&self, h: usize, w: usize) -> Result<Grid> {
        let p = self.patch;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(VisionError::Config(format!("image {h}x{w} is not divisible by patch size {p}")));
        }
        Ok(Grid { rows: h / p, cols: w / p })
    }

    /// `L_V x 3 d_p^2` patch matrix of one frame, patches row-major and each
    /// flattened channel, row, column.
    fn patchify(&self, frame: &[f64], h: usize, w: usize, grid: Grid) -> Vec<f64> {
        let p = self.patch;
        let mut out = Vec::with_capacity(grid.len() * 3 * p * p);
        for pr in 0..grid.rows {
            for pc in 0..grid.cols {
                for c in 0..VisualInput::CHANNELS {
                    for y in 0..p {
                        let row = (c * h + pr * p + y) * w + pc * p;
                        out.extend_from_slice(&frame[row..row + p]);
                    }
                }
            }
        }
        out
    }
}

impl VisualEncoder for PatchLinearEncoder {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn feature_dim(&self) -> usize {
        self.proj.d_out()
    }

    fn encode(&self, input: &VisualInput) -> Result<VisualFeatures> {
        let grid = self.grid_for(input.height(), input.width())?;
        let d_in = VisualInput::CHANNELS * self.patch * self.patch;
        let per_frame = (0..input.frames())
            .map(|i| {
                let patches = self.patchify(input.frame(i), input.height(), input.width(), grid);
                Ok(self.proj.forward(&Tensor::new(patches, &[grid.len(), d_in])?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisualFeatures { per_frame, grid })
    }
}

impl Module for PatchLinearEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        self.proj.parameters()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.proj.parameters_mut()
    }
}

/// Row indices that gather each 2x2 neighbourhood (top-left, top-right,
/// bottom-left, bottom-right) of a row-major grid.
fn downsample_indices(grid: Grid) -> Result<Vec<usize>> {
    for (name, v) in [("rows", grid.rows), ("cols", grid.cols)] {
        if v % 2 != 0 {
            return Err(VisionError::Config(format!("patch grid {name} = {v} must be even to downsample")));
        }
    }
    let mut idx = Vec::with_capacity(grid.len());
    for r in (0..grid.rows).step_by(2) {
        for c in (0..grid.cols).step_by(2) {
            let tl = r * grid.cols + c;
            idx.extend([tl, tl + 1, tl + grid.cols, tl + grid.cols + 1]);
        }
    }
    Ok(idx)
}

/// Space-to-depth: `L_V x D_V` becomes `L_V/4 x 4 D_V`.
pub fn downsample_frame(features: &Tensor, grid: Grid) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] != grid.len() {
        return Err(VisionError::Config(format!(
            "features {:?} do not match a {}x{} grid",
            features.shape(),
            grid.rows,
            grid.cols
        )));
    }
    let d = features.shape()[1];
    let idx = downsample_indices(grid)?;
    Ok(features.gather_rows(&idx)?.reshape(&[grid.len() / 4, 4 * d])?)
}

pub fn downsample(features: &VisualFeatures) -> Result<Vec<Tensor>> {
    features.per_frame.iter().map(|f| downsample_frame(f, features.grid)).collect()
}

/// Stacked per-unit visual embeddings, units in temporal order.
#[derive(Debug, Clone)]
pub struct VisualEmbeddings {
    pub values: Tensor,
    pub per_unit: usize,
}

impl VisualEmbeddings {
    pub fn units(&self) -> usize {
        self.values.shape()[0] / self.per_unit
    }

    pub fn unit(&self, i: usize) -> Result<Tensor> {
        Ok(self.values.narrow(0, i * self.per_unit, self.per_unit)?)
    }

    pub fn split(&self) -> Result<Vec<Tensor>> {
        (0..self.units()).map(|i| self.unit(i)).collect()
    }
}

/// Two linear layers with a ReLU between them, `4 D_V -> D_P -> D_P`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new(d_v: usize, d_p: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Projector {
            fc1: Linear::new("projector.fc1", 4 * d_v, d_p, &mut rng)?,
            fc2: Linear::new("projector.fc2", d_p, d_p, &mut rng)?,
        })
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Self {
        Projector { fc1, fc2 }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.d_out()
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        if tokens.rank() != 2 || tokens.shape()[1] != self.in_dim() {
            return Err(VisionError::Tensor(crate::tensor::dim_err(
                "project",
                format!("tokens {:?}, projector expects depth {}", tokens.shape(), self.in_dim()),
            )));
        }
        Ok(self.fc2.forward(&self.fc1.forward(tokens)?.relu())?)
    }

    /// Project downsampled frames, concatenating them in order.
    pub fn project(&self, downsampled: &[Tensor]) -> Result<VisualEmbeddings> {
        let first = downsampled.first().ok_or_else(|| VisionError::Config("no frames to project".into()))?;
        let per_unit = first.shape()[0];
        let units = downsampled.iter().map(|f| self.forward(f)).collect::<Result<Vec<_>>>()?;
        Ok(VisualEmbeddings { values: Tensor::concat(&units, 0)?, per_unit })
    }

    /// Image or video features straight through downsample and MLP.
    pub fn embed_features(&self, features: &VisualFeatures) -> Result<VisualEmbeddings> {
        self.project(&downsample(features)?)
    }

    /// The change map is flattened back to `L_V x D_V` and handled like one image.
    pub fn embed_change(&self, change: &ChangeFeatureMap) -> Result<VisualEmbeddings> {
        let flat = change.to_patch_rows()?;
        self.project(&[downsample_frame(&flat, change.grid())?])
    }
}

impl Module for Projector {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.fc1.parameters();
        v.extend(self.fc2.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.fc1.parameters_mut();
        v.extend(self.fc2.parameters_mut());
        v
    }
}
