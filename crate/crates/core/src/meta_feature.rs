//! Multi-scale dilated 2×2 window unfolding and max/mean induction.
//!
//! A low-level map `[B×C×h×w]` is unfolded once per dilation `d = 1..=scale`
//! into windows of `C·4` values; the per-dilation window sets are concatenated
//! along the last (window) axis in ascending `d`. Inside a window, values are
//! channel-major and then row-major over the taps:
//! `c0@(0,0), c0@(0,1), c0@(1,0), c0@(1,1), c1@(0,0), …`.
//! This ordering is part of the on-disk contract of trained adapters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::par;

pub const KERNEL: usize = 2;
pub const MAX_SCALE: usize = 5;
pub const DEFAULT_SCALE: usize = 2;

/// Encoder stage whose feature map feeds a local branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Layer {
    Layer3,
    Layer4,
}

impl Layer {
    pub const ALL: [Layer; 2] = [Layer::Layer3, Layer::Layer4];

    pub fn id(self) -> u8 {
        match self {
            Layer::Layer3 => 3,
            Layer::Layer4 => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            3 => Ok(Layer::Layer3),
            4 => Ok(Layer::Layer4),
            other => Err(Error::Validation(format!(
                "layer {other} is not supported (expected 3 or 4)"
            ))),
        }
    }

    /// Record-name suffix used in feature bundles.
    pub fn tag(self) -> &'static str {
        match self {
            Layer::Layer3 => "low3",
            Layer::Layer4 => "low4",
        }
    }
}

impl TryFrom<u8> for Layer {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Layer::from_id(id)
    }
}

impl From<Layer> for u8 {
    fn from(l: Layer) -> u8 {
        l.id()
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}", self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfoldSpec {
    pub kernel: (usize, usize),
    pub dilations: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
}

impl UnfoldSpec {
    /// Dilations `1..=scale`, stride 1, no padding.
    pub fn for_scale(scale: usize) -> Result<Self> {
        if !(1..=MAX_SCALE).contains(&scale) {
            return Err(Error::Validation(format!(
                "scale {scale} outside 1..={MAX_SCALE}"
            )));
        }
        Ok(UnfoldSpec {
            kernel: (KERNEL, KERNEL),
            dilations: (1..=scale).collect(),
            stride: 1,
            padding: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != (KERNEL, KERNEL) {
            return Err(Error::Validation(format!(
                "only 2x2 windows are supported, got {:?}",
                self.kernel
            )));
        }
        if self.padding != 0 || self.stride == 0 {
            return Err(Error::Validation(
                "windows require padding 0 and a positive stride".into(),
            ));
        }
        if self.dilations.is_empty()
            || self.dilations[0] == 0
            || self.dilations.windows(2).any(|p| p[0] >= p[1])
            || *self.dilations.last().unwrap() > MAX_SCALE
        {
            return Err(Error::Validation(format!(
                "dilations {:?} must be strictly increasing within 1..={MAX_SCALE}",
                self.dilations
            )));
        }
        Ok(())
    }

    /// Output grid `(rows, cols)` of one dilation on an `h×w` map.
    pub fn grid(&self, h: usize, w: usize, d: usize) -> Result<(usize, usize)> {
        let span = d * (KERNEL - 1);
        if d == 0 || h <= span || w <= span {
            return Err(Error::Geometry {
                layer: None,
                dilation: d,
                h,
                w,
            });
        }
        Ok((
            (h - span - 1) / self.stride + 1,
            (w - span - 1) / self.stride + 1,
        ))
    }

    /// Window counts `m_d` for every dilation.
    pub fn widths(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        self.dilations
            .iter()
            .map(|&d| self.grid(h, w, d).map(|(r, c)| r * c))
            .collect()
    }
}

/// Total window-axis extent `ms` of a map at the given scale.
pub fn window_extent(h: usize, w: usize, scale: usize) -> Result<usize> {
    Ok(UnfoldSpec::for_scale(scale)?.widths(h, w)?.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaFeature<T = f32> {
    /// `[B × c × ms]` with `c = C·4`.
    pub values: Tensor<T>,
    pub layer: Layer,
    pub per_scale_widths: Vec<usize>,
}

impl<T: Real> MetaFeature<T> {
    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfUnit<T = f32> {
    /// `[B × 2 × ms]`: channel 0 is the window max, channel 1 the window mean.
    pub values: Tensor<T>,
    pub layer: Layer,
    pub per_scale_widths: Vec<usize>,
}

fn map_dims<T: Real>(map: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match map.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        s => Err(Error::dim(
            "unfold",
            format!("expected [B×C×h×w], got {s:?}"),
        )),
    }
}

/// Writes the windows of one dilation into `out[c·4 × row_len]` starting at
/// column `offset`, for a single batch item.
fn unfold_item<T: Real>(
    src: &[T],
    (channels, h, w): (usize, usize, usize),
    d: usize,
    stride: usize,
    (rows, cols): (usize, usize),
    (out, row_len, offset): (&mut [T], usize, usize),
) {
    for ch in 0..channels {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for tap in 0..KERNEL * KERNEL {
            let (dr, dc) = (tap / KERNEL * d, tap % KERNEL * d);
            let dst = &mut out[(ch * 4 + tap) * row_len + offset..];
            for r in 0..rows {
                let src_row = &plane[(r * stride + dr) * w..];
                for c in 0..cols {
                    dst[r * cols + c] = src_row[c * stride + dc];
                }
            }
        }
    }
}

/// Unfolds one dilation into `[B × C·4 × m_d]`.
pub fn unfold<T: Real>(map: &Tensor<T>, d: usize, spec: &UnfoldSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (b, c, h, w) = map_dims(map)?;
    let grid = spec.grid(h, w, d)?;
    let m = grid.0 * grid.1;
    let row = c * KERNEL * KERNEL * m;
    let mut out = vec![T::zero(); b * row];
    let src = map.data();
    par::for_each_chunk_mut(&mut out, row, |i, dst| {
        let item = &src[i * c * h * w..(i + 1) * c * h * w];
        unfold_item(item, (c, h, w), d, spec.stride, grid, (dst, m, 0));
    });
    Ok(Tensor::from_parts(vec![b, c * 4, m], out))
}

/// Unfolds at dilations `1..=scale` and concatenates along the window axis.
pub fn build_meta_feature<T: Real>(
    map: &Tensor<T>,
    layer: Layer,
    scale: usize,
) -> Result<MetaFeature<T>> {
    let spec = UnfoldSpec::for_scale(scale)?;
    let (b, c, h, w) = map_dims(map)?;
    let widths = spec.widths(h, w).map_err(|e| match e {
        Error::Geometry { dilation, h, w, .. } => Error::Geometry {
            layer: Some(layer.id()),
            dilation,
            h,
            w,
        },
        e => e,
    })?;
    let ms: usize = widths.iter().sum();
    let row = c * 4 * ms;
    let mut out = vec![T::zero(); b * row];
    let src = map.data();
    let grids: Vec<(usize, usize)> = spec
        .dilations
        .iter()
        .map(|&d| spec.grid(h, w, d))
        .collect::<Result<_>>()?;
    par::for_each_chunk_mut(&mut out, row, |i, dst| {
        let item = &src[i * c * h * w..(i + 1) * c * h * w];
        let mut offset = 0;
        for (&d, &grid) in spec.dilations.iter().zip(&grids) {
            unfold_item(
                item,
                (c, h, w),
                d,
                spec.stride,
                grid,
                (&mut *dst, ms, offset),
            );
            offset += grid.0 * grid.1;
        }
    });
    Ok(MetaFeature {
        values: Tensor::from_parts(vec![b, c * 4, ms], out),
        layer,
        per_scale_widths: widths,
    })
}

/// Reduces the window-channel axis by max and by mean.
pub fn induce_mf_unit<T: Real>(mf: &MetaFeature<T>) -> MfUnit<T> {
    let (b, c, ms) = (mf.batch(), mf.channels(), mf.width());
    let src = mf.values.data();
    let mut out = vec![T::zero(); b * 2 * ms];
    par::for_each_chunk_mut(&mut out, 2 * ms, |i, dst| {
        let item = &src[i * c * ms..(i + 1) * c * ms];
        let (maxes, means) = dst.split_at_mut(ms);
        for j in 0..ms {
            let mut mx = item[j];
            let mut sum = 0.0f64;
            for ch in 0..c {
                let v = item[ch * ms + j];
                if v > mx {
                    mx = v;
                }
                sum += v.wide();
            }
            maxes[j] = mx;
            means[j] = T::of(sum / c as f64);
        }
    });
    MfUnit {
        values: Tensor::from_parts(vec![b, 2, ms], out),
        layer: mf.layer,
        per_scale_widths: mf.per_scale_widths.clone(),
    }
}
