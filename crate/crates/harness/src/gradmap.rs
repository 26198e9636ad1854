//! Per-pixel gradient magnitudes for masking visualization.

use std::fs;
use std::path::Path;

use mutattack_core::attacks::GradientProvider;
use mutattack_core::nn::LossKind;
use mutattack_core::Tensor;

use crate::error::{io_error, HarnessError, Result};

/// `|∇ₓ CE|` laid out as the input's `H × W` grid (channels summed).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl GradientMap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn gradient_map(provider: &dyn GradientProvider, x: &Tensor, y: usize) -> Result<GradientMap> {
    let shape = provider.input_shape().to_vec();
    let (channels, rows, cols) = match shape[..] {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        [w] => (1, 1, w),
        _ => {
            return Err(HarnessError::Plan(format!(
                "cannot map input shape {shape:?} to a grid"
            )))
        }
    };
    let grads = provider.loss_gradients(x.data(), &[y], LossKind::CrossEntropy)?;
    let g = grads[0].wrt_input.data();
    let plane = rows * cols;
    let values = (0..plane)
        .map(|p| (0..channels).map(|c| g[c * plane + p].abs()).sum())
        .collect();
    Ok(GradientMap { rows, cols, values })
}

/// Writes the gradient map of `provider` at `(x, y)` to `out` as CSV.
pub fn dump_gradient_map(
    provider: &dyn GradientProvider,
    x: &Tensor,
    y: usize,
    out: &Path,
) -> Result<GradientMap> {
    let map = gradient_map(provider, x, y)?;
    fs::write(out, map.to_csv()).map_err(io_error(out))?;
    Ok(map)
}
