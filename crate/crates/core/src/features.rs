//! Log-mel spectral features at the model's 50 Hz frame rate.
//!
//! Each 20 ms hop yields one frame; the 25 ms analysis window is Hann
//! weighted, zero padded to the FFT size, and projected onto a triangular
//! mel filterbank. Features are `log(x + 1e-6)` of the mel energies.

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Floor added before the log so silence maps to a finite constant.
pub const LOG_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub mel_bins: usize,
    pub window_secs: f64,
    pub hop_secs: f64,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { mel_bins: 40, window_secs: 0.025, hop_secs: 0.020, sample_rate: 16000, fft_size: 512 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let hop = self.hop_samples();
        let win = self.window_samples();
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be positive".into()));
        }
        if win == 0 || hop == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        let hop_exact = self.hop_secs * self.sample_rate as f64;
        if (hop_exact - hop as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hop {} s is not a whole number of samples at {} Hz",
                self.hop_secs, self.sample_rate
            )));
        }
        if self.fft_size < win {
            return Err(Error::Config("fft_size must cover the analysis window".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_secs * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_secs * self.sample_rate as f64).round() as usize
    }

    /// Frames produced for `samples` of input: `ceil(samples / hop)`. The
    /// final window is zero padded past the end of the audio, so a 20 s
    /// input at the defaults yields exactly 1000 frames.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop_samples())
    }

    /// Model frame rate implied by the hop (50 Hz at the defaults).
    pub fn frame_rate(&self) -> f64 {
        1.0 / self.hop_secs
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Extracts log-mel features from one or more equally long channels.
pub struct FeatureExtractor {
    config: FeatureConfig,
    window: Vec<f32>,
    /// `mel_bins` rows of triangular weights over the FFT magnitude bins.
    filterbank: Vec<Vec<(usize, f32)>>,
    fft: Arc<dyn Fft<f32>>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        let window = (0..win)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / win as f64;
                (0.5 - 0.5 * phase.cos()) as f32
            })
            .collect();
        let filterbank = build_filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Self { config, window, filterbank, fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Log-mel features for one channel: `frames x mel_bins`.
    pub fn extract_channel(&self, samples: &[i16]) -> Result<Array2<f32>> {
        let win = self.config.window_samples();
        let hop = self.config.hop_samples();
        if samples.len() < win {
            return Err(Error::AudioTooShort);
        }
        let frames = self.config.frame_count(samples.len());
        let half = self.config.fft_size / 2 + 1;
        let mut out = Array2::<f32>::zeros((frames, self.config.mel_bins));
        let mut buf = vec![Complex32::new(0.0, 0.0); self.config.fft_size];
        let mut mags = vec![0f32; half];
        for f in 0..frames {
            let start = f * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = samples.get(start + i).copied().unwrap_or(0);
                let w = if i < win { self.window[i] } else { 0.0 };
                *slot = Complex32::new(s as f32 / 32768.0 * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (i, m) in mags.iter_mut().enumerate() {
                *m = buf[i].norm();
            }
            let mut row = out.row_mut(f);
            for (bin, weights) in self.filterbank.iter().enumerate() {
                let mut acc = 0f32;
                for &(i, w) in weights {
                    acc += mags[i] * w;
                }
                row[bin] = (acc + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    /// Features for every channel of a session.
    pub fn extract(&self, channels: &[Vec<i16>]) -> Result<Vec<Array2<f32>>> {
        channels.iter().map(|c| self.extract_channel(c)).collect()
    }

    /// Feature row of a single frame given a sample window starting at
    /// `frame * hop`; missing tail samples are zero padded. Used by the
    /// streaming path. `window` must hold at least the available samples.
    pub fn extract_frame(&self, window: &[i16]) -> Vec<f32> {
        let win = self.config.window_samples();
        let half = self.config.fft_size / 2 + 1;
        let mut buf = vec![Complex32::new(0.0, 0.0); self.config.fft_size];
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = window.get(i).copied().unwrap_or(0);
            let w = if i < win { self.window[i] } else { 0.0 };
            *slot = Complex32::new(s as f32 / 32768.0 * w, 0.0);
        }
        self.fft.process(&mut buf);
        let mags: Vec<f32> = (0..half).map(|i| buf[i].norm()).collect();
        self.filterbank
            .iter()
            .map(|weights| {
                let acc: f32 = weights.iter().map(|&(i, w)| mags[i] * w).sum();
                (acc + LOG_FLOOR).ln()
            })
            .collect()
    }
}

fn build_filterbank(config: &FeatureConfig) -> Vec<Vec<(usize, f32)>> {
    let half = config.fft_size / 2 + 1;
    let sr = config.sample_rate as f64;
    let f_max = sr / 2.0;
    let mel_max = hz_to_mel(f_max);
    let points: Vec<f64> = (0..config.mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (config.mel_bins + 1) as f64))
        .collect();
    let bin_hz = sr / config.fft_size as f64;
    let mut bank = Vec::with_capacity(config.mel_bins);
    for m in 0..config.mel_bins {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let mut weights = Vec::new();
        for i in 0..half {
            let f = i as f64 * bin_hz;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if (f - mid).abs() < 1e-12 {
                1.0
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                weights.push((i, w as f32));
            }
        }
        bank.push(weights);
    }
    bank
}

/// Per-feature normalization statistics, estimated on the training split
/// and stored in the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNormalizer {
    /// Identity normalizer (zero mean, unit scale).
    pub fn identity(mel_bins: usize) -> Self {
        Self { mean: vec![0.0; mel_bins], std: vec![1.0; mel_bins] }
    }

    /// Estimate mean and standard deviation per mel bin over many feature
    /// matrices (all channels pooled).
    pub fn fit<'a>(features: impl Iterator<Item = &'a Array2<f32>>, mel_bins: usize) -> Self {
        let mut count = 0f64;
        let mut sum = vec![0f64; mel_bins];
        let mut sumsq = vec![0f64; mel_bins];
        for feat in features {
            for row in feat.rows() {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v as f64;
                    sumsq[i] += (v as f64) * (v as f64);
                }
            }
            count += feat.nrows() as f64;
        }
        if count == 0.0 {
            return Self::identity(mel_bins);
        }
        let mean: Vec<f32> = sum.iter().map(|&s| (s / count) as f32).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| {
                let var = (sq / count - (m as f64) * (m as f64)).max(0.0);
                (var.sqrt() as f32).max(1e-6)
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &mut Array2<f32>) {
        for mut row in features.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_seconds_yields_exactly_one_thousand_frames() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let audio = vec![0i16; 320_000];
        let feats = ex.extract_channel(&audio).unwrap();
        assert_eq!(feats.nrows(), 1000);
        assert_eq!(feats.ncols(), 40);
    }

    #[test]
    fn zero_audio_gives_constant_log_floor() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let feats = ex.extract_channel(&vec![0i16; 16_000]).unwrap();
        let expect = LOG_FLOOR.ln();
        assert!(feats.iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn doubling_amplitude_shifts_log_features() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let mut rng = 1u64;
        let noise: Vec<i16> = (0..16_000)
            .map(|_| {
                // Simple LCG noise, loud enough that the log floor is negligible.
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((rng >> 40) as i16 / 4).clamp(-8000, 8000)
            })
            .collect();
        let doubled: Vec<i16> = noise.iter().map(|&s| s * 2).collect();
        let a = ex.extract_channel(&noise).unwrap();
        let b = ex.extract_channel(&doubled).unwrap();
        let ln2 = std::f32::consts::LN_2;
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((y - x - ln2).abs() < 1e-3, "expected +ln2 shift, got {} -> {}", x, y);
        }
    }

    #[test]
    fn rejects_audio_shorter_than_window() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        assert!(matches!(ex.extract_channel(&vec![0i16; 100]), Err(Error::AudioTooShort)));
    }

    #[test]
    fn streaming_frame_matches_batch() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let audio: Vec<i16> = (0..16_000).map(|i| ((i * 37) % 2000) as i16 - 1000).collect();
        let batch = ex.extract_channel(&audio).unwrap();
        let hop = ex.config().hop_samples();
        for f in [0usize, 5, 40] {
            let start = f * hop;
            let end = (start + 512).min(audio.len());
            let row = ex.extract_frame(&audio[start..end]);
            for (i, &v) in row.iter().enumerate() {
                assert_eq!(v, batch[[f, i]], "frame {f} bin {i}");
            }
        }
    }

    #[test]
    fn normalizer_fit_and_apply() {
        let a = Array2::from_shape_fn((100, 4), |(i, j)| (i as f32 * 0.01) + j as f32);
        let norm = FeatureNormalizer::fit(std::iter::once(&a), 4);
        let mut b = a.clone();
        norm.apply(&mut b);
        for j in 0..4 {
            let col: Vec<f32> = b.column(j).to_vec();
            let mean: f32 = col.iter().sum::<f32>() / col.len() as f32;
            assert!(mean.abs() < 1e-4);
        }
    }
}
