use super::grid::Grid;
use super::normalize::NormalizedSpectrogram;
use crate::error::{Error, Result};

pub const CONTEXT_FRAMES: usize = 128;
pub const HORIZON_FRAMES: usize = 256;
pub const DEFAULT_STRIDE: usize = 16;

/// A context window and the frames that immediately follow it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub context: Grid,
    pub future: Grid,
    pub origin_frame: usize,
}

/// Contiguous `(context, future)` pairs at origins `0, stride, 2*stride, ...`.
pub fn window_pairs(
    spec: &NormalizedSpectrogram,
    ctx: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    grid_window_pairs(&spec.frames, ctx, horizon, stride)
}

/// Same as [`window_pairs`] over any time-major grid (also used for piano rolls).
pub fn grid_window_pairs(
    frames: &Grid,
    ctx: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if stride == 0 || ctx == 0 || horizon == 0 {
        return Err(Error::invalid("ctx, horizon and stride must be positive"));
    }
    let t = frames.rows();
    if t < ctx + horizon {
        return Err(Error::invalid(format!(
            "spectrogram too short: {t} frames < {}",
            ctx + horizon
        )));
    }
    let count = (t - ctx - horizon) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let origin = i * stride;
            WindowPair {
                context: frames.sub_rows(origin, ctx),
                future: frames.sub_rows(origin + ctx, horizon),
                origin_frame: origin,
            }
        })
        .collect())
}
