//! Audio clips, the three-channel log spectrogram stack, row normalization
//! and spectrogram masking.

mod augment;
mod cache;
mod cqt;
mod filterbank;
mod stft;
mod wav;

pub use augment::{augment_waveform, WaveAugment, MIN_FRAGMENT_S};
pub use cache::{config_hash, read_stack, write_stack};
pub use cqt::CqtKernel;
pub use filterbank::{erb_bandwidth, gammatone_filterbank, mel_filterbank};
pub use stft::{istft, stft, Complex};
pub use wav::{read_wav, resample, write_wav};

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventRecord;

/// Natural-log floor added to power before taking the log.
pub const LOG_FLOOR_POWER: f64 = 1e-10;
const NORM_EPS: f64 = 1e-8;

/// Optional per-clip recording metadata tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub position: Option<String>,
    pub gender: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    /// Mono samples in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub events: Vec<EventRecord>,
    pub meta: ClipMeta,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            id: id.into(),
            samples,
            sample_rate,
            events: Vec::new(),
            meta: ClipMeta::default(),
        }
    }

    pub fn with_events(mut self, events: Vec<EventRecord>) -> Self {
        self.events = events;
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self, vocab: Option<&[String]>) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Domain("sample rate must be > 0".into()));
        }
        let dur = self.duration_s();
        for ev in &self.events {
            ev.validate(vocab)?;
            if ev.onset_s < 0.0 || ev.offset_s > dur + 1.0 / self.sample_rate as f64 {
                return Err(Error::Domain(format!(
                    "event ({}, {}) outside clip of {dur} s",
                    ev.onset_s, ev.offset_s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Mel,
    Gamma,
    Cqt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Rate every clip is resampled to before analysis.
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_len: usize,
    pub hop_len: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_bands: usize,
    pub channels: Vec<Channel>,
    /// Native CQT hop in samples; the CQT is interpolated onto the STFT grid.
    pub cqt_hop: usize,
    pub cqt_bins_per_octave: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            n_fft: 1024,
            win_len: 1000,
            hop_len: 128,
            f_min: 32.7,
            f_max: 4000.0,
            n_bands: 84,
            channels: vec![Channel::Mel, Channel::Gamma, Channel::Cqt],
            cqt_hop: 256,
            cqt_bins_per_octave: 12,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.hop_len > 0 && self.hop_len <= self.win_len && self.win_len <= self.n_fft) {
            return bad("need 0 < hop_len <= win_len <= n_fft");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad("need 0 < f_min < f_max <= sample_rate / 2");
        }
        if self.n_bands == 0 {
            return bad("n_bands must be > 0");
        }
        if self.channels.is_empty() {
            return bad("at least one channel is required");
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].contains(c) {
                return bad("channels must be distinct");
            }
        }
        if self.channels.contains(&Channel::Cqt) {
            if self.cqt_hop == 0 || self.cqt_bins_per_octave == 0 {
                return bad("cqt_hop and cqt_bins_per_octave must be > 0");
            }
            let top = self.f_min
                * 2f64.powf((self.n_bands - 1) as f64 / self.cqt_bins_per_octave as f64);
            if top >= nyquist {
                return Err(Error::Config(format!(
                    "highest CQT bin {top:.1} Hz is not below Nyquist {nyquist} Hz"
                )));
            }
        }
        Ok(())
    }

    /// Frame count under centered framing.
    pub fn frames_for(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_len
    }
}

/// Log-power spectrograms stacked on the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramStack {
    /// Shape (channels, bands, frames).
    pub values: Array3<f32>,
    /// Center time of each frame, seconds.
    pub frame_times: Vec<f64>,
    pub source_duration_s: f64,
    pub n_samples: usize,
    pub hop_len: usize,
}

impl SpectrogramStack {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn bands(&self) -> usize {
        self.values.dim().1
    }

    pub fn frames(&self) -> usize {
        self.values.dim().2
    }
}

/// HTK mel scale.
pub fn mel_of_hz(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::Domain(format!("frequency must be >= 0, got {f}")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn hz_of_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Computes the log-scaled spectrogram stack. The clip must already be at
/// `cfg.sample_rate`.
pub fn compute_stack(clip: &AudioClip, cfg: &FeatureConfig) -> Result<SpectrogramStack> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip is at {} Hz but features expect {} Hz",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let n = clip.samples.len();
    if n < cfg.win_len {
        return Err(Error::ClipTooShort {
            samples: n,
            win_len: cfg.win_len,
        });
    }
    let samples: Vec<f64> = clip.samples.iter().map(|&x| x as f64).collect();
    let frames = cfg.frames_for(n);
    let m = cfg.n_bands;
    let sr = cfg.sample_rate as f64;

    // The power spectrum is shared by the FFT-domain banks.
    let needs_power = cfg
        .channels
        .iter()
        .any(|c| matches!(c, Channel::Mel | Channel::Gamma));
    let power: Vec<Vec<f64>> = if needs_power {
        stft(&samples, cfg.n_fft, cfg.win_len, cfg.hop_len)
            .into_iter()
            .map(|frame| frame.iter().map(|c| c.norm_sqr()).collect())
            .collect()
    } else {
        Vec::new()
    };
    debug_assert!(!needs_power || power.len() == frames);

    let frame_times: Vec<f64> = (0..frames)
        .map(|j| (j * cfg.hop_len) as f64 / sr)
        .collect();

    let mut values = Array3::<f32>::zeros((cfg.channels.len(), m, frames));
    for (ci, channel) in cfg.channels.iter().enumerate() {
        let band_power: Vec<Vec<f64>> = match channel {
            Channel::Mel => apply_bank(
                &power,
                &mel_filterbank(cfg.n_fft, sr, cfg.f_min, cfg.f_max, m),
            ),
            Channel::Gamma => apply_bank(
                &power,
                &gammatone_filterbank(cfg.n_fft, sr, cfg.f_min, cfg.f_max, m),
            ),
            Channel::Cqt => {
                let kernel = CqtKernel::new(sr, cfg.f_min, m, cfg.cqt_bins_per_octave);
                let native = kernel.transform(&samples, cfg.cqt_hop);
                let native_times: Vec<f64> = (0..native.len())
                    .map(|j| (j * cfg.cqt_hop) as f64 / sr)
                    .collect();
                let logged: Vec<Vec<f64>> = native
                    .iter()
                    .map(|f| f.iter().map(|p| (p + LOG_FLOOR_POWER).ln()).collect())
                    .collect();
                let interp = interpolate_frames(&native_times, &logged, &frame_times);
                for (j, frame) in interp.iter().enumerate() {
                    for (b, &v) in frame.iter().enumerate() {
                        values[[ci, b, j]] = v as f32;
                    }
                }
                continue;
            }
        };
        for (j, frame) in band_power.iter().enumerate() {
            for (b, &p) in frame.iter().enumerate() {
                values[[ci, b, j]] = (p + LOG_FLOOR_POWER).ln() as f32;
            }
        }
    }

    Ok(SpectrogramStack {
        values,
        frame_times,
        source_duration_s: clip.duration_s(),
        n_samples: n,
        hop_len: cfg.hop_len,
    })
}

fn apply_bank(power: &[Vec<f64>], bank: &[Vec<f64>]) -> Vec<Vec<f64>> {
    power
        .iter()
        .map(|frame| {
            bank.iter()
                .map(|w| w.iter().zip(frame).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Linear interpolation of frame vectors onto new times; holds the end
/// values outside the source range.
fn interpolate_frames(src_times: &[f64], src: &[Vec<f64>], dst_times: &[f64]) -> Vec<Vec<f64>> {
    dst_times
        .iter()
        .map(|&t| {
            let hi = src_times.partition_point(|&s| s < t);
            if hi == 0 {
                src[0].clone()
            } else if hi >= src.len() {
                src[src.len() - 1].clone()
            } else {
                let (t0, t1) = (src_times[hi - 1], src_times[hi]);
                let w = (t - t0) / (t1 - t0);
                src[hi - 1]
                    .iter()
                    .zip(&src[hi])
                    .map(|(a, b)| a + w * (b - a))
                    .collect()
            }
        })
        .collect()
}

/// Z-scores every (channel, band) row over time. Constant rows become zero.
pub fn row_normalize(stack: &SpectrogramStack) -> SpectrogramStack {
    let mut out = stack.clone();
    for mut channel in out.values.axis_iter_mut(Axis(0)) {
        for mut row in channel.axis_iter_mut(Axis(0)) {
            let first = row[0];
            if row.iter().all(|&v| v == first) {
                row.fill(0.0);
                continue;
            }
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let denom = var.sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| ((v as f64 - mean) / denom) as f32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAxis {
    Time,
    Frequency,
}

/// Replaces a band or frame range in every channel with the row mean
/// (zero after row normalization).
pub fn mask_range(
    stack: &SpectrogramStack,
    axis: MaskAxis,
    start: usize,
    width: usize,
) -> Result<SpectrogramStack> {
    let extent = match axis {
        MaskAxis::Time => stack.frames(),
        MaskAxis::Frequency => stack.bands(),
    };
    if width >= extent || start + width > extent {
        return Err(Error::Domain(format!(
            "mask [{start}, {}) does not fit an axis of {extent}",
            start + width
        )));
    }
    let mut out = stack.clone();
    for mut channel in out.values.axis_iter_mut(Axis(0)) {
        for (b, mut row) in channel.axis_iter_mut(Axis(0)).enumerate() {
            let mean =
                (row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64) as f32;
            match axis {
                MaskAxis::Time => {
                    for j in start..start + width {
                        row[j] = mean;
                    }
                }
                MaskAxis::Frequency => {
                    if (start..start + width).contains(&b) {
                        row.fill(mean);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Applies `count` masks of `width` at uniformly random positions.
pub fn mask_spectrogram<R: Rng>(
    stack: &SpectrogramStack,
    axis: MaskAxis,
    width: usize,
    count: usize,
    rng: &mut R,
) -> Result<SpectrogramStack> {
    let extent = match axis {
        MaskAxis::Time => stack.frames(),
        MaskAxis::Frequency => stack.bands(),
    };
    if count > 0 && width >= extent {
        return Err(Error::Domain(format!(
            "mask width {width} must be smaller than axis extent {extent}"
        )));
    }
    let mut out = stack.clone();
    for _ in 0..count {
        let start = rng.random_range(0..=extent - width);
        out = mask_range(&out, axis, start, width)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn stack_from(values: Array3<f32>) -> SpectrogramStack {
        let frames = values.dim().2;
        SpectrogramStack {
            values,
            frame_times: (0..frames).map(|j| j as f64).collect(),
            source_duration_s: frames as f64,
            n_samples: frames,
            hop_len: 1,
        }
    }

    #[test]
    fn mel_formula() {
        assert_eq!(mel_of_hz(0.0).unwrap(), 0.0);
        assert_relative_eq!(mel_of_hz(700.0).unwrap(), 2595.0 * 2f64.log10(), epsilon = 1e-9);
        assert_relative_eq!(mel_of_hz(700.0).unwrap(), 781.17, epsilon = 5e-3);
        assert_relative_eq!(mel_of_hz(4000.0).unwrap(), 2146.06, epsilon = 5e-3);
        assert!(mel_of_hz(-1.0).is_err());
        assert_relative_eq!(hz_of_mel(mel_of_hz(1234.5).unwrap()), 1234.5, epsilon = 1e-9);
    }

    #[test]
    fn default_shapes() {
        let cfg = FeatureConfig::default();
        for (secs, frames) in [(10.0, 626), (9.2, 576)] {
            let n = (secs * 8000.0f64).round() as usize;
            let clip = AudioClip::new("x", vec![0.0; n], 8000);
            let s = compute_stack(&clip, &cfg).unwrap();
            assert_eq!(s.values.dim(), (3, 84, frames));
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new("x", vec![0.0; 8000], 8000);
        let s = compute_stack(&clip, &cfg).unwrap();
        let floor = (LOG_FLOOR_POWER).ln() as f32;
        assert!(s.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new("x", vec![0.0; 999], 8000);
        assert!(matches!(
            compute_stack(&clip, &cfg),
            Err(Error::ClipTooShort { .. })
        ));
    }

    #[test]
    fn tone_peaks_in_matching_band() {
        let cfg = FeatureConfig::default();
        let f0 = 440.0;
        let samples: Vec<f32> = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / 8000.0).sin() as f32 * 0.5)
            .collect();
        let s = compute_stack(&AudioClip::new("t", samples, 8000), &cfg).unwrap();
        // CQT bin for 440 Hz: 12 * log2(440 / 32.7) = 45.0
        let mid = s.frames() / 2;
        let cqt_col: Vec<f32> = (0..84).map(|b| s.values[[2, b, mid]]).collect();
        let peak = cqt_col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((44..=46).contains(&peak), "cqt peak at {peak}");
        for ch in 0..2 {
            let col: Vec<f32> = (0..84).map(|b| s.values[[ch, b, mid]]).collect();
            let peak = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let centers = match ch {
                0 => filterbank::mel_centers(cfg.f_min, cfg.f_max, 84),
                _ => filterbank::erb_centers(cfg.f_min, cfg.f_max, 84),
            };
            assert!(
                (centers[peak] - f0).abs() < 40.0,
                "channel {ch} peak at {} Hz",
                centers[peak]
            );
        }
    }

    #[test]
    fn row_normalize_cases() {
        let s = stack_from(array![[[3.0f32, 3.0, 3.0], [0.0, 2.0, 1.0]]]);
        let n = row_normalize(&s);
        assert!(n.values.slice(ndarray::s![0, 0, ..]).iter().all(|&v| v == 0.0));
        let s = stack_from(array![[[0.0f32, 2.0]]]);
        let n = row_normalize(&s);
        assert_relative_eq!(n.values[[0, 0, 0]], -1.0, epsilon = 1e-6);
        assert_relative_eq!(n.values[[0, 0, 1]], 1.0, epsilon = 1e-6);
        let twice = row_normalize(&n);
        for (a, b) in n.values.iter().zip(twice.values.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let base = Array3::from_shape_fn((3, 20, 100), |(c, b, j)| {
            ((c * 7 + b * 3 + j) % 11) as f32
        });
        let s = row_normalize(&stack_from(base));
        assert_eq!(mask_spectrogram(&s, MaskAxis::Time, 10, 0, &mut rng).unwrap(), s);

        let m = mask_range(&s, MaskAxis::Time, 50, 10).unwrap();
        for c in 0..3 {
            for b in 0..20 {
                for j in 0..100 {
                    let v = m.values[[c, b, j]];
                    if (50..60).contains(&j) {
                        assert!(v.abs() < 1e-6);
                    } else {
                        assert_eq!(v, s.values[[c, b, j]]);
                    }
                }
            }
        }

        let m = mask_spectrogram(&s, MaskAxis::Frequency, 4, 2, &mut rng).unwrap();
        let zero_rows = (0..20)
            .filter(|&b| m.values.slice(ndarray::s![0, b, ..]).iter().all(|v| v.abs() < 1e-6))
            .count();
        assert!((4..=8).contains(&zero_rows));
        assert!(mask_range(&s, MaskAxis::Frequency, 0, 20).is_err());
    }

    #[test]
    fn channel_order_permutes_output() {
        let samples: Vec<f32> = (0..9000).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        let clip = AudioClip::new("p", samples, 8000);
        let a = compute_stack(&clip, &FeatureConfig::default()).unwrap();
        let cfg = FeatureConfig {
            channels: vec![Channel::Cqt, Channel::Mel, Channel::Gamma],
            ..FeatureConfig::default()
        };
        let b = compute_stack(&clip, &cfg).unwrap();
        for (ib, ia) in [(0usize, 2usize), (1, 0), (2, 1)] {
            assert_eq!(
                b.values.index_axis(Axis(0), ib),
                a.values.index_axis(Axis(0), ia)
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeatureConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.hop_len = 2000;
        assert!(cfg.validate().is_err());
        let cfg = FeatureConfig {
            f_max: 5000.0,
            ..FeatureConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FeatureConfig {
            channels: vec![Channel::Mel, Channel::Mel],
            ..FeatureConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
