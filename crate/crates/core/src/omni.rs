//! Operators specific to equirectangular panoramas: circular padding with
//! pole wrap, roll branching, the rolling metric distance and the circular
//! Gaussian rotation mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rolled_sq_dist, rows_width_depth, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizontalPad {
    /// Left edge continues from the right edge and vice versa.
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalPad {
    Zero,
    /// Rows past a pole continue from the same edge rotated by half the width.
    PoleWrap,
}

/// Padding style for a convolution; amounts are derived from the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub horizontal: HorizontalPad,
    pub vertical: VerticalPad,
}

impl Padding {
    pub const OMNI: Padding = Padding {
        horizontal: HorizontalPad::Circular,
        vertical: VerticalPad::PoleWrap,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadMode {
    pub style: Padding,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadMode {
    /// Amounts that keep the spatial size under a `kh × kw` kernel.
    pub fn same(style: Padding, kh: usize, kw: usize) -> Self {
        PadMode {
            style,
            top: kh / 2,
            bottom: kh / 2,
            left: kw / 2,
            right: kw / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

/// Source index for every element of the padded tensor (`None` = zero),
/// and the padded shape.
pub fn pad_index(shape: &[usize], mode: &PadMode) -> Result<(Vec<Option<usize>>, Vec<usize>)> {
    let &[h, w, c] = shape else {
        return Err(Error::ShapeMismatch {
            op: "pad",
            expected: vec![0, 0, 0],
            got: shape.to_vec(),
        });
    };
    if mode.left >= w || mode.right >= w {
        return Err(Error::invalid(format!(
            "pad: horizontal amounts ({}, {}) must be smaller than width {w}",
            mode.left, mode.right
        )));
    }
    if mode.style.vertical == VerticalPad::PoleWrap && (mode.top > h || mode.bottom > h) {
        return Err(Error::invalid(format!(
            "pad: pole wrap amounts ({}, {}) exceed height {h}",
            mode.top, mode.bottom
        )));
    }
    let ph = h + mode.top + mode.bottom;
    let pw = w + mode.left + mode.right;
    let (hi, wi) = (h as isize, w as isize);
    let mut index = Vec::with_capacity(ph * pw * c);
    for py in 0..ph {
        let sy = py as isize - mode.top as isize;
        // (row, column rotation) or None for a zero row
        let row = if (0..hi).contains(&sy) {
            Some((sy, 0))
        } else {
            match mode.style.vertical {
                VerticalPad::Zero => None,
                VerticalPad::PoleWrap if sy < 0 => Some((-sy - 1, wi / 2)),
                VerticalPad::PoleWrap => Some((2 * hi - 1 - sy, wi / 2)),
            }
        };
        for px in 0..pw {
            let sx = px as isize - mode.left as isize;
            let col = if (0..wi).contains(&sx) {
                Some(sx)
            } else {
                match mode.style.horizontal {
                    HorizontalPad::Circular => Some(sx.rem_euclid(wi)),
                    HorizontalPad::Zero => None,
                }
            };
            match (row, col) {
                (Some((r, rot)), Some(cx)) => {
                    let cx = (cx + rot).rem_euclid(wi);
                    let base = ((r * wi + cx) as usize) * c;
                    index.extend((0..c).map(|ch| Some(base + ch)));
                }
                _ => index.extend(std::iter::repeat(None).take(c)),
            }
        }
    }
    Ok((index, vec![ph, pw, c]))
}

/// Pads an `H × W × C` tensor.
pub fn circular_pad<T: Real>(x: &Tensor<T>, mode: &PadMode) -> Result<Tensor<T>> {
    let (index, shape) = pad_index(x.shape(), mode)?;
    let data = index
        .iter()
        .map(|i| i.map_or(T::zero(), |i| x.data()[i]))
        .collect();
    Tensor::new(shape, data)
}

/// Shifts the width dimension left by `k`: output column `j` is input column
/// `(j + k) mod w`. Accepts `h × w × d` and `w × d` tensors.
pub fn shift_columns<T: Real>(z: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, d) = rows_width_depth("shift_columns", z.shape())?;
    let mut out = Vec::with_capacity(z.numel());
    for r in 0..h {
        for j in 0..w {
            out.extend_from_slice(&z.data()[(r * w + (j + k) % w) * d..][..d]);
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

#[derive(Debug, Clone)]
pub struct RollBranchOutput<T> {
    pub branches: Vec<Tensor<T>>,
}

impl<T> RollBranchOutput<T> {
    pub fn width(&self) -> usize {
        self.branches.len()
    }
}

/// All `w` cyclic left shifts of a feature map; branch `k` is the map
/// shifted left by `k`.
pub fn roll_branch<T: Real>(z: &Tensor<T>) -> Result<RollBranchOutput<T>> {
    let (_, w, _) = rows_width_depth("roll_branch", z.shape())?;
    let branches = (0..w).map(|k| shift_columns(z, k)).collect::<Result<_>>()?;
    Ok(RollBranchOutput { branches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingDistance {
    /// `distances[k] = ‖shift_k(z_i) − z_j‖₂`
    pub distances: Vec<f64>,
    pub d_min: f64,
    /// Smallest `k` attaining `d_min`.
    pub r_hat: usize,
}

/// Rolling metric distance between two maps of identical shape.
pub fn rolling_distance<T: Real>(zi: &Tensor<T>, zj: &Tensor<T>) -> Result<RollingDistance> {
    if zi.shape() != zj.shape() {
        return Err(Error::ShapeMismatch {
            op: "rolling_distance",
            expected: zi.shape().to_vec(),
            got: zj.shape().to_vec(),
        });
    }
    let (h, w, d) = rows_width_depth("rolling_distance", zi.shape())?;
    let a: Vec<f64> = zi.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let b: Vec<f64> = zj.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let distances: Vec<f64> = (0..w)
        .map(|k| rolled_sq_dist(&a, &b, h, w, d, k).sqrt())
        .collect();
    let (r_hat, d_min) =
        distances
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (k, v)| if v < best.1 { (k, v) } else { best },
            );
    Ok(RollingDistance {
        distances,
        d_min,
        r_hat,
    })
}

/// Distance between flattened maps without any shift.
pub fn aligned_distance<T: Real>(zi: &Tensor<T>, zj: &Tensor<T>) -> Result<f64> {
    if zi.shape() != zj.shape() {
        return Err(Error::ShapeMismatch {
            op: "aligned_distance",
            expected: zi.shape().to_vec(),
            got: zj.shape().to_vec(),
        });
    }
    let s: f64 = zi
        .data()
        .iter()
        .zip(zj.data())
        .map(|(p, q)| (p.to_f64().unwrap() - q.to_f64().unwrap()).powi(2))
        .sum();
    Ok(s.sqrt())
}

/// Below this width the mask collapses to a one-hot vector.
pub const SIGMA_ONE_HOT: f64 = 1e-6;

/// Wrapped, discretized Gaussian over `w` rotation bins centered at `center`,
/// normalized to sum to one.
pub fn gaussian_rotation_mask(center: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    if w < 1 {
        return Err(Error::invalid(
            "gaussian_rotation_mask: w must be at least 1",
        ));
    }
    if center >= w {
        return Err(Error::invalid(format!(
            "gaussian_rotation_mask: center {center} outside 0..{w}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "gaussian_rotation_mask: sigma {sigma} must be positive"
        )));
    }
    if sigma <= SIGMA_ONE_HOT {
        let mut g = vec![0.0; w];
        g[center] = 1.0;
        return Ok(g);
    }
    let raw: Vec<f64> = (0..w)
        .map(|k| {
            let diff = k.abs_diff(center);
            let dist = diff.min(w - diff) as f64;
            (-0.5 * (dist / sigma).powi(2)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}
