use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::spectrum::MelSpectrogram;
use crate::error::{Error, Result};

/// Corpus-global min/max used to map log-mel values onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub lo: f64,
    pub hi: f64,
}

/// Log-mel frames mapped into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSpectrogram {
    pub frames: Grid,
    pub frame_shift_s: f64,
}

impl NormalizedSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

pub fn fit_normalization<'a>(
    corpus: impl IntoIterator<Item = &'a MelSpectrogram>,
) -> Result<NormalizationStats> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for spec in corpus {
        any = true;
        lo = lo.min(spec.frames.min() as f64);
        hi = hi.max(spec.frames.max() as f64);
    }
    if !any {
        return Err(Error::invalid("empty corpus"));
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("corpus contains non-finite values"));
    }
    if lo >= hi {
        return Err(Error::invalid(format!("degenerate corpus: constant value {lo}")));
    }
    Ok(NormalizationStats { lo, hi })
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid stats lo={} hi={}", self.lo, self.hi)))
        }
    }

    /// `2(x - lo)/(hi - lo) - 1`, clamped to `[-1, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        (2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.lo + (y + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

pub fn normalize(spec: &MelSpectrogram, stats: &NormalizationStats) -> NormalizedSpectrogram {
    let data = spec
        .frames
        .data()
        .iter()
        .map(|&x| stats.apply(x as f64) as f32)
        .collect();
    NormalizedSpectrogram {
        frames: Grid::new(spec.frames.rows(), spec.frames.cols(), data),
        frame_shift_s: spec.frame_shift_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(values: Vec<f32>) -> MelSpectrogram {
        let n = values.len();
        MelSpectrogram {
            frames: Grid::new(1, n, values),
            frame_shift_s: 0.01,
        }
    }

    #[test]
    fn stats_are_corpus_extremes() {
        let a = spec(vec![-23.0, 0.0]);
        let b = spec(vec![4.6, -1.0]);
        let s = fit_normalization([&a, &b]).unwrap();
        assert_eq!((s.lo, s.hi), (-23.0f32 as f64, 4.6f32 as f64));
        assert_eq!(s.apply(s.lo), -1.0);
        assert_eq!(s.apply(s.hi), 1.0);
    }

    #[test]
    fn constant_corpus_is_degenerate() {
        let a = spec(vec![0.0; 4]);
        let err = fit_normalization([&a]).unwrap_err();
        assert!(err.to_string().contains("degenerate corpus"));
    }

    #[test]
    fn linear_map_examples() {
        let s = NormalizationStats { lo: -3.0, hi: 5.0 };
        assert_eq!(s.apply(1.0), 0.0);
        assert_eq!(s.apply(15.0), 1.0);
        let s = NormalizationStats { lo: 0.0, hi: 2.0 };
        assert_eq!(s.apply(0.5), -0.5);
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(lo in -50.0f64..0.0, span in 0.1f64..60.0, a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let s = NormalizationStats { lo, hi: lo + span };
            let (x1, x2) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.apply(x1) <= s.apply(x2));
            prop_assert!((-1.0..=1.0).contains(&s.apply(a)));
        }
    }
}
