//! Framed power spectra and Kaldi-style log-mel filterbanks.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::wav::PcmSignal;
use crate::error::{Error, Result};

/// Floor added before the logarithm so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

/// Power spectrogram: one row per frame, `n_fft/2 + 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub power: Grid,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
}

/// Log-mel energies, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Grid,
    pub frame_shift_s: f64,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn mel_scale(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn inverse_mel_scale(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Symmetric Hann window, `0.5 - 0.5 cos(2 pi n / (N - 1))`.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Number of frames of length `win` with hop `hop` in `n` samples.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win {
        0
    } else {
        (n - win) / hop + 1
    }
}

/// Samples per frame/hop for a given duration, rounded to the nearest sample.
pub fn samples_for(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

/// Hann-windowed framing followed by the squared DFT magnitude.
pub fn stft_power(signal: &PcmSignal, frame_len_s: f64, frame_shift_s: f64) -> Result<PowerSpectrogram> {
    if !(frame_shift_s > 0.0 && frame_len_s >= frame_shift_s) {
        return Err(Error::invalid(format!(
            "need frame_len ({frame_len_s}) >= frame_shift ({frame_shift_s}) > 0"
        )));
    }
    let win = samples_for(frame_len_s, signal.sample_rate).max(1);
    let hop = samples_for(frame_shift_s, signal.sample_rate).max(1);
    let frames = frame_count(signal.len(), win, hop);
    if frames == 0 {
        return Err(Error::invalid(format!(
            "signal shorter than one frame: {} samples < {win}",
            signal.len()
        )));
    }
    let n_fft = win.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = Vec::with_capacity(frames * bins);
    for k in 0..frames {
        let start = k * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(signal.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        power.extend(buf[..bins].iter().map(|c| c.norm_sqr() as f32));
    }
    Ok(PowerSpectrogram {
        power: Grid::new(frames, bins, power),
        n_fft,
        sample_rate: signal.sample_rate,
        hop,
        win,
    })
}

/// Triangular mel filterbank: `n_mels` rows over `n_fft/2 + 1` FFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        let bins = n_fft / 2 + 1;
        if n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if n_mels > bins {
            return Err(Error::invalid(format!(
                "n_mels ({n_mels}) exceeds the number of DFT bins ({bins})"
            )));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist + 1e-9) {
            return Err(Error::invalid(format!(
                "need 0 <= fmin ({fmin}) < fmax ({fmax}) <= nyquist ({nyquist})"
            )));
        }
        let (lo, hi) = (mel_scale(fmin), mel_scale(fmax));
        let delta = (hi - lo) / (n_mels + 1) as f64;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = Vec::with_capacity(n_mels);
        let mut centers_hz = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let left = lo + m as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            let mut row = vec![0.0; bins];
            for (k, w) in row.iter_mut().enumerate() {
                let mel = mel_scale(k as f64 * bin_hz);
                if mel > left && mel < right {
                    *w = if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    };
                }
            }
            let center_hz = inverse_mel_scale(center);
            if row.iter().all(|&w| w == 0.0) {
                // narrower than one FFT bin: take the nearest bin
                let k = ((center_hz / bin_hz).round() as usize).min(bins - 1);
                row[k] = 1.0;
            }
            weights.push(row);
            centers_hz.push(center_hz);
        }
        Ok(Self {
            weights,
            centers_hz,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// Filter whose center frequency is closest to `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }
}

/// Mel filterbank parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            fmin: 20.0,
            fmax: None,
        }
    }
}

/// `ln(filterbank . power + 1e-10)` per frame. No energy coefficient.
pub fn log_mel(power: &PowerSpectrogram, cfg: MelConfig) -> Result<MelSpectrogram> {
    let fmax = cfg.fmax.unwrap_or(power.sample_rate as f64 / 2.0);
    let bank = MelFilterbank::new(power.sample_rate, power.n_fft, cfg.n_mels, cfg.fmin, fmax)?;
    Ok(apply_filterbank(power, &bank))
}

pub fn apply_filterbank(power: &PowerSpectrogram, bank: &MelFilterbank) -> MelSpectrogram {
    let frames = power.power.rows();
    let mut out = Vec::with_capacity(frames * bank.n_mels());
    for t in 0..frames {
        let row = power.power.row(t);
        for w in &bank.weights {
            let e: f64 = w
                .iter()
                .zip(row)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, p)| w * *p as f64)
                .sum();
            out.push((e + LOG_FLOOR).ln() as f32);
        }
    }
    MelSpectrogram {
        frames: Grid::new(frames, bank.n_mels(), out),
        frame_shift_s: power.hop as f64 / power.sample_rate as f64,
    }
}

/// Frontend geometry: frame length and shift in seconds plus the mel bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_len_s: f64,
    pub frame_shift_s: f64,
    pub mel: MelConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_len_s: 0.025,
            frame_shift_s: 0.010,
            mel: MelConfig::default(),
        }
    }
}

/// PCM to log-mel in one call.
pub fn log_mel_spectrogram(signal: &PcmSignal, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    let power = stft_power(signal, cfg.frame_len_s, cfg.frame_shift_s)?;
    log_mel(&power, cfg.mel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, seconds: f64) -> PcmSignal {
        let n = (rate as f64 * seconds) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        PcmSignal::new(s, rate).unwrap()
    }

    /// O(N^2) DFT power of one windowed frame.
    fn brute_dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn hop_at_44k() {
        assert_eq!(samples_for(0.010, 44100), 441);
    }

    #[test]
    fn mel_of_700() {
        assert!((mel_scale(700.0) - 1127.0 * 2f64.ln()).abs() < 1e-9);
        assert!((mel_scale(700.0) - 781.17).abs() < 0.01);
    }

    #[test]
    fn zero_signal_gives_zero_power_and_log_floor() {
        let sig = PcmSignal::new(vec![0.0; 4410], 44100).unwrap();
        let p = stft_power(&sig, 0.025, 0.010).unwrap();
        assert!(p.power.data().iter().all(|&x| x == 0.0));
        let mel = log_mel(&p, MelConfig::default()).unwrap();
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(mel.frames.data().iter().all(|&x| x == floor));
    }

    #[test]
    fn short_signal_errors() {
        let sig = PcmSignal::new(vec![0.0; 100], 44100).unwrap();
        assert!(stft_power(&sig, 0.025, 0.010).is_err());
    }

    #[test]
    fn fft_matches_brute_force_dft() {
        let sig = sine(1000.0, 8000, 0.1);
        let p = stft_power(&sig, 0.025, 0.010).unwrap();
        let w = hann(p.win);
        for k in [0, 3] {
            let frame: Vec<f64> = (0..p.win)
                .map(|i| sig.samples[k * p.hop + i] as f64 * w[i])
                .collect();
            let brute = brute_dft_power(&frame, p.n_fft);
            for (a, b) in p.power.row(k).iter().zip(&brute) {
                assert!((*a as f64 - b).abs() <= 1e-4 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sine_peaks_at_nearest_dft_bin() {
        let sig = sine(1000.0, 44100, 0.2);
        let p = stft_power(&sig, 0.025, 0.010).unwrap();
        let bin_hz = 44100.0 / p.n_fft as f64;
        let want = (1000.0 / bin_hz).round() as usize;
        for t in 0..p.power.rows() {
            assert_eq!(p.power.argmax_row(t), want);
        }
    }

    #[test]
    fn a440_peaks_at_nearest_mel_filter() {
        let sig = sine(440.0, 44100, 0.2);
        let p = stft_power(&sig, 0.025, 0.010).unwrap();
        let bank = MelFilterbank::new(44100, p.n_fft, 128, 20.0, 22050.0).unwrap();
        // centers from the mel formula directly
        let (lo, hi) = (mel_scale(20.0), mel_scale(22050.0));
        let centers: Vec<f64> = (1..=128)
            .map(|m| inverse_mel_scale(lo + m as f64 * (hi - lo) / 129.0))
            .collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let mel = apply_filterbank(&p, &bank);
        for t in 0..mel.n_frames() {
            assert_eq!(mel.frames.argmax_row(t), nearest);
        }
    }

    #[test]
    fn filters_are_positive_triangles_that_overlap() {
        let bank = MelFilterbank::new(44100, 2048, 128, 20.0, 22050.0).unwrap();
        for (i, w) in bank.weights.iter().enumerate() {
            assert!(w.iter().sum::<f64>() > 0.0, "filter {i} empty");
            let support: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.0).collect();
            let (a, b) = (support[0], *support.last().unwrap());
            assert!(support.len() == b - a + 1, "filter {i} support not contiguous");
            let peak = (a..=b).max_by(|&x, &y| w[x].partial_cmp(&w[y]).unwrap()).unwrap();
            assert!((a..peak).all(|k| w[k] <= w[k + 1]), "filter {i} not rising");
            assert!((peak..b).all(|k| w[k] >= w[k + 1]), "filter {i} not falling");
        }
        for i in 0..127 {
            let overlap = bank.weights[i]
                .iter()
                .zip(&bank.weights[i + 1])
                .any(|(a, b)| *a > 0.0 && *b > 0.0);
            assert!(overlap, "filters {i} and {} disjoint", i + 1);
        }
    }

    #[test]
    fn low_rate_filters_never_empty() {
        let bank = MelFilterbank::new(16000, 512, 128, 20.0, 8000.0).unwrap();
        assert!(bank.weights.iter().all(|w| w.iter().sum::<f64>() > 0.0));
    }

    #[test]
    fn too_many_mels() {
        assert!(MelFilterbank::new(8000, 64, 40, 20.0, 4000.0).is_err());
    }

    #[test]
    fn frame_count_matches_brute_force() {
        for n in [400usize, 401, 440, 841, 1000, 4410, 12345] {
            let brute = (0..).take_while(|k| k * 160 + 400 <= n).count();
            assert_eq!(frame_count(n, 400, 160), brute);
        }
    }

    #[test]
    fn window_geometry_durations() {
        assert!((128.0 * 0.010 - 1.28f64).abs() < 1e-12);
        assert!((256.0 * 0.010 - 2.56f64).abs() < 1e-12);
    }
}
