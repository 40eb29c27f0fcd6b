//! Fixed SRM high-pass filter bank.
//!
//! Converts an RGB image into a noise-residual image that emphasizes
//! resampling artifacts. The bank holds the three classic steganalysis
//! kernels; each kernel runs on each input channel separately, so a
//! 3-channel image yields `3 * kernel_count` residual channels, ordered
//! kernel-major (`k * 3 + c`). Responses are divided by the kernel's
//! divisor and clamped to the truncation threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::{pad, resize};
use crate::tensor::Tensor;

/// One high-pass kernel with its normalization divisor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SrmKernel {
    pub name: String,
    /// Square grid of raw integer-valued coefficients.
    pub coeffs: Vec<Vec<f64>>,
    pub divisor: f64,
}

impl SrmKernel {
    pub fn side(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.coeffs.iter().flatten().sum()
    }
}

/// The fixed, non-learned filter bank.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FilterBank {
    pub kernels: Vec<SrmKernel>,
    /// Residuals are clamped to +/- this bound after normalization.
    pub truncation_threshold: f64,
}

impl FilterBank {
    /// The standard three-kernel bank: 5x5 "KV", 3x3 second-order square,
    /// and the 3x3 edge residual.
    pub fn standard() -> FilterBank {
        let k = |name: &str, rows: &[&[i32]], divisor: f64| SrmKernel {
            name: name.to_string(),
            coeffs: rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect(),
            divisor,
        };
        FilterBank {
            kernels: vec![
                k(
                    "kv5",
                    &[
                        &[-1, 2, -2, 2, -1],
                        &[2, -6, 8, -6, 2],
                        &[-2, 8, -12, 8, -2],
                        &[2, -6, 8, -6, 2],
                        &[-1, 2, -2, 2, -1],
                    ],
                    12.0,
                ),
                k("square3", &[&[-1, 2, -1], &[2, -4, 2], &[-1, 2, -1]], 4.0),
                k("edge3", &[&[-1, 2, -1], &[2, -4, 2], &[0, 0, 0]], 4.0),
            ],
            truncation_threshold: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("filter bank needs at least one kernel".into()));
        }
        if self.truncation_threshold <= 0.0 {
            return Err(Error::Config("truncation threshold must be positive".into()));
        }
        for k in &self.kernels {
            let side = k.side();
            if side % 2 == 0 || k.coeffs.iter().any(|r| r.len() != side) {
                return Err(Error::Config(format!(
                    "kernel {} must be square with odd side",
                    k.name
                )));
            }
            if k.divisor == 0.0 {
                return Err(Error::Config(format!("kernel {} has zero divisor", k.name)));
            }
            if k.coefficient_sum().abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "kernel {} is not zero-sum (high-pass property violated)",
                    k.name
                )));
            }
        }
        Ok(())
    }

    /// Residual channels produced for a 3-channel input.
    pub fn residual_channels(&self) -> usize {
        self.kernels.len() * 3
    }

    pub fn max_side(&self) -> usize {
        self.kernels.iter().map(SrmKernel::side).max().unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FilterBank> {
        let bank: FilterBank = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        bank.validate()?;
        Ok(bank)
    }

    /// Per-channel conv weights: each kernel embedded (zero-padded) into
    /// the bank's max side so one convolution covers the whole bank.
    /// Coefficients stay raw; normalization divides the conv output so
    /// integer-valued inputs cancel exactly under zero-sum kernels.
    fn to_weights(&self) -> Tensor {
        let side = self.max_side();
        let kn = self.kernels.len();
        let mut w = vec![0.0; kn * 3 * 3 * side * side];
        for (ki, k) in self.kernels.iter().enumerate() {
            let off = (side - k.side()) / 2;
            for c in 0..3 {
                let out = ki * 3 + c;
                for (i, row) in k.coeffs.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        w[((out * 3 + c) * side + i + off) * side + j + off] = v;
                    }
                }
            }
        }
        Tensor::new([kn * 3, 3, side, side], w)
    }
}

/// Compute the noise residual of an RGB image tensor ([N,3,H,W], 0..=255).
///
/// Output is [N, 3*kernels, H, W]: reflect-padded convolution, normalized
/// by each kernel's divisor, clamped to the truncation threshold.
pub fn apply(image: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    bank.validate()?;
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::Channels { expected: 3, got: c });
    }
    let side = bank.max_side();
    if h < side || w < side {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than largest kernel side {}",
            h, w, side
        )));
    }
    let radius = side / 2;
    let padded = pad::reflect_pad(image, radius, radius, radius, radius);
    let weights = bank.to_weights();
    let mut out = conv::conv2d(&padded, &weights, None, &ConvSpec::unit(1, 0));
    debug_assert_eq!([out.h(), out.w()], [h, w]);
    let t = bank.truncation_threshold;
    let [n, oc, oh, ow] = out.shape();
    let plane = oh * ow;
    let data = out.data_mut();
    for b in 0..n {
        for c in 0..oc {
            let divisor = bank.kernels[c / 3].divisor;
            let start = (b * oc + c) * plane;
            for v in &mut data[start..start + plane] {
                *v = (*v / divisor).clamp(-t, t);
            }
        }
    }
    Ok(out)
}

/// Bilinear reduction to (h, w). Rejects upsampling: this operation only
/// shrinks (or keeps) each spatial dimension.
pub fn downsample(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Parameter("downsample target must be at least 1x1".into()));
    }
    if h > input.h() || w > input.w() {
        return Err(Error::Parameter(format!(
            "downsample cannot upscale: target {}x{} exceeds source {}x{}",
            h,
            w,
            input.h(),
            input.w()
        )));
    }
    Ok(resize::bilinear(input, h, w))
}
