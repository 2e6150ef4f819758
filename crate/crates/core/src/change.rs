//! Change extraction for dual-time image pairs.
//!
//! The two patch feature sets are concatenated along depth and laid out on
//! the patch grid. A per-position cosine distance, projected into the
//! concatenated channel space by a learned vector, is added on top
//! (spatial enhancement). A 1x1 convolution then halves the depth, and a
//! `1x1 -> ReLU -> 3x3 -> ReLU -> 1x1` block adds a residual correction
//! (fusion). The result is a `D_V x H' x W'` change map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::param::{uniform, Conv2d, Module, Parameter};
use crate::tensor::{dim_err, Result, Tensor};
use crate::vision::{Grid, VisualFeatures};

pub const COSINE_EPS: f64 = 1e-8;

/// Time-1 and time-2 patch features on a shared grid.
#[derive(Debug, Clone)]
pub struct DualTimeFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
    pub grid: Grid,
}

impl DualTimeFeatures {
    pub fn new(f1: Tensor, f2: Tensor, grid: Grid) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(dim_err("dual_time", format!("f1 {:?} vs f2 {:?}", f1.shape(), f2.shape())));
        }
        if f1.rank() != 2 || f1.shape()[0] != grid.len() {
            return Err(dim_err(
                "dual_time",
                format!("features {:?} do not fit a {}x{} grid", f1.shape(), grid.rows, grid.cols),
            ));
        }
        Ok(DualTimeFeatures { f1, f2, grid })
    }

    /// Take the two frames of encoded pair features.
    pub fn from_features(features: &VisualFeatures) -> Result<Self> {
        match features.per_frame.as_slice() {
            [a, b] => Self::new(a.clone(), b.clone(), features.grid),
            other => Err(dim_err("dual_time", format!("expected 2 frames, got {}", other.len()))),
        }
    }

    pub fn depth(&self) -> usize {
        self.f1.shape()[1]
    }
}

/// `L x C` patch rows to a `C x rows x cols` map, patch `p` at `(p / cols, p % cols)`.
pub fn rows_to_map(rows: &Tensor, grid: Grid) -> Result<Tensor> {
    let c = rows.shape()[1];
    rows.transpose()?.reshape(&[c, grid.rows, grid.cols])
}

/// Inverse of [`rows_to_map`].
pub fn map_to_rows(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match map.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(dim_err("map_to_rows", format!("expected C x H x W, got {s:?}"))),
    };
    map.reshape(&[c, h * w])?.transpose()
}

#[derive(Debug, Clone)]
pub struct SpatialEnhanceParams {
    /// Projection of the scalar distance into `2 D_V` channels.
    pub w_embed: Parameter,
}

impl SpatialEnhanceParams {
    pub fn zeros(d_v: usize) -> Result<Self> {
        Ok(SpatialEnhanceParams { w_embed: Parameter::new("change.spatial.w_embed", vec![0.0; 2 * d_v], &[2 * d_v])? })
    }

    pub fn with_values(w_embed: Vec<f64>) -> Result<Self> {
        let n = w_embed.len();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(dim_err("spatial_enhance", format!("w_embed length {n} must be 2 D_V")));
        }
        Ok(SpatialEnhanceParams { w_embed: Parameter::new("change.spatial.w_embed", w_embed, &[n])? })
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub conv_half: Conv2d,
    pub conv1: Conv2d,
    pub conv3: Conv2d,
    pub conv_out: Conv2d,
}

impl FusionParams {
    /// Default initialization: small uniform `conv_half`, random inner block
    /// layers, zero output layer so the block starts as a zero residual.
    pub fn init(d_v: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let half = uniform(rng, d_v * 2 * d_v, 0.02);
        Ok(FusionParams {
            conv_half: Conv2d::with_weights("change.fusion.conv_half", half, vec![0.0; d_v], 2 * d_v, d_v, 1, 0)?,
            conv1: Conv2d::new("change.fusion.block.conv1", d_v, d_v, 1, 0, rng)?,
            conv3: Conv2d::new("change.fusion.block.conv3", d_v, d_v, 3, 1, rng)?,
            conv_out: Conv2d::zeros("change.fusion.block.conv_out", d_v, d_v, 1, 0)?,
        })
    }

    pub fn d_v(&self) -> usize {
        self.conv_half.weight.shape()[0]
    }

    /// Zero every weight and bias of the residual block.
    pub fn zero_block(&mut self) {
        for conv in [&mut self.conv1, &mut self.conv3, &mut self.conv_out] {
            for p in conv.parameters_mut() {
                let n = p.data().len();
                p.set_data(vec![0.0; n]).expect("same length");
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChangeFeatureMap {
    values: Tensor,
}

impl ChangeFeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(dim_err("change_map", format!("expected D_V x H x W, got {:?}", values.shape())));
        }
        Ok(ChangeFeatureMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> Grid {
        Grid { rows: self.values.shape()[1], cols: self.values.shape()[2] }
    }

    /// Back to `L_V x D_V` in row-major patch order.
    pub fn to_patch_rows(&self) -> Result<Tensor> {
        map_to_rows(&self.values)
    }
}

/// Concatenated features plus the projected cosine distance, as a
/// `2 D_V x H' x W'` map.
pub fn spatial_enhance(d: &DualTimeFeatures, p: &SpatialEnhanceParams) -> Result<Tensor> {
    let dv = d.depth();
    if p.w_embed.shape() != [2 * dv] {
        return Err(dim_err("spatial_enhance", format!("w_embed {:?} for D_V = {dv}", p.w_embed.shape())));
    }
    let l = d.grid.len();
    let cat = Tensor::concat(&[d.f1.clone(), d.f2.clone()], 1)?;
    let dist = d.f1.cosine_similarity_rows(&d.f2, COSINE_EPS)?.affine(-1.0, 1.0).reshape(&[l, 1])?;
    let embed = dist.matmul(&p.w_embed.tensor().reshape(&[1, 2 * dv])?)?;
    rows_to_map(&cat.add(&embed)?, d.grid)
}

/// `mid = conv_half(x)`, result `mid + block(mid)`.
pub fn fuse(enhanced: &Tensor, p: &FusionParams) -> Result<ChangeFeatureMap> {
    let dv = p.d_v();
    if enhanced.rank() != 3 || enhanced.shape()[0] != 2 * dv {
        return Err(dim_err("fuse", format!("input {:?} must have 2 D_V = {} channels", enhanced.shape(), 2 * dv)));
    }
    let mid = p.conv_half.forward(enhanced)?;
    let h = p.conv1.forward(&mid)?.relu();
    let h = p.conv3.forward(&h)?.relu();
    let block = p.conv_out.forward(&h)?;
    ChangeFeatureMap::new(mid.add(&block)?)
}

pub fn change_extract(d: &DualTimeFeatures, sp: &SpatialEnhanceParams, fp: &FusionParams) -> Result<ChangeFeatureMap> {
    fuse(&spatial_enhance(d, sp)?, fp)
}

/// Parameter owner for the whole change-extraction module.
#[derive(Debug, Clone)]
pub struct ChangeExtractor {
    pub spatial: SpatialEnhanceParams,
    pub fusion: FusionParams,
}

impl ChangeExtractor {
    pub fn new(d_v: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ChangeExtractor { spatial: SpatialEnhanceParams::zeros(d_v)?, fusion: FusionParams::init(d_v, &mut rng)? })
    }

    pub fn forward(&self, d: &DualTimeFeatures) -> Result<ChangeFeatureMap> {
        change_extract(d, &self.spatial, &self.fusion)
    }
}

impl Module for ChangeExtractor {
    fn parameters(&self) -> Vec<&Parameter> {
        let f = &self.fusion;
        let mut v = vec![&self.spatial.w_embed];
        for c in [&f.conv_half, &f.conv1, &f.conv3, &f.conv_out] {
            v.extend(c.parameters());
        }
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let f = &mut self.fusion;
        let mut v = vec![&mut self.spatial.w_embed];
        for c in [&mut f.conv_half, &mut f.conv1, &mut f.conv3, &mut f.conv_out] {
            v.extend(c.parameters_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(seed: u64, l: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(uniform(&mut rng, l * d, 1.0), &[l, d]).unwrap()
    }

    const G33: Grid = Grid { rows: 3, cols: 3 };

    #[test]
    fn identical_inputs_reduce_to_concat() {
        let f = feats(1, 9, 4);
        let d = DualTimeFeatures::new(f.clone(), f.clone(), G33).unwrap();
        let sp = SpatialEnhanceParams::with_values((0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let out = spatial_enhance(&d, &sp).unwrap();
        let cat = rows_to_map(&Tensor::concat(&[f.clone(), f], 1).unwrap(), G33).unwrap();
        assert_eq!(out.data(), cat.data());
    }

    #[test]
    fn zero_projection_reduces_to_concat() {
        let (a, b) = (feats(2, 9, 4), feats(3, 9, 4));
        let d = DualTimeFeatures::new(a.clone(), b.clone(), G33).unwrap();
        let out = spatial_enhance(&d, &SpatialEnhanceParams::zeros(4).unwrap()).unwrap();
        let cat = rows_to_map(&Tensor::concat(&[a, b], 1).unwrap(), G33).unwrap();
        assert_eq!(out.data(), cat.data());
    }

    #[test]
    fn zero_block_returns_mid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fp = FusionParams::init(4, &mut rng).unwrap();
        fp.zero_block();
        let x = Tensor::new(uniform(&mut rng, 8 * 9, 1.0), &[8, 3, 3]).unwrap();
        let out = fuse(&x, &fp).unwrap();
        assert_eq!(out.values().data(), fp.conv_half.forward(&x).unwrap().data());
    }

    #[test]
    fn averaging_conv_half_on_constant_input() {
        let d_v = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fp = FusionParams::init(d_v, &mut rng).unwrap();
        fp.zero_block();
        fp.conv_half.weight.set_data(vec![1.0 / 6.0; d_v * 2 * d_v]).unwrap();
        let x = Tensor::new(vec![0.6; 2 * d_v * 4], &[2 * d_v, 2, 2]).unwrap();
        let out = fuse(&x, &fp).unwrap();
        let v0 = out.values().data()[0];
        assert!(out.values().data().iter().all(|&v| v == v0));
    }

    #[test]
    fn shape_law_14x14() {
        let grid = Grid { rows: 14, cols: 14 };
        let d = DualTimeFeatures::new(feats(5, 196, 8), feats(6, 196, 8), grid).unwrap();
        let m = ChangeExtractor::new(8, 1).unwrap();
        assert_eq!(m.forward(&d).unwrap().values().shape(), &[8, 14, 14]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fp = FusionParams::init(4, &mut rng).unwrap();
        assert!(fuse(&Tensor::zeros(&[6, 3, 3]).unwrap(), &fp).is_err());
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        assert!(DualTimeFeatures::new(feats(1, 9, 2), feats(2, 9, 2), Grid { rows: 2, cols: 4 }).is_err());
        assert!(DualTimeFeatures::new(feats(1, 9, 2), feats(2, 9, 3), G33).is_err());
    }

    #[test]
    fn map_round_trip() {
        let rows = feats(9, 6, 5);
        let g = Grid { rows: 2, cols: 3 };
        assert_eq!(map_to_rows(&rows_to_map(&rows, g).unwrap()).unwrap().data(), rows.data());
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = ChangeExtractor::new(4, 0).unwrap();
        let names: std::collections::HashSet<_> = m.parameters().iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names.len(), m.parameters().len());
        assert!(names.iter().all(|n| n.starts_with("change.")));
    }
}
