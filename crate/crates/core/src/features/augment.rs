//! Waveform-level augmentation with event bookkeeping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stft::{istft, stft, Complex};
use super::AudioClip;
use crate::error::{Error, Result};
use crate::events::EventRecord;

/// Fragments shorter than this are dropped after a circular shift.
pub const MIN_FRAGMENT_S: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WaveAugment {
    /// Additive white Gaussian noise at the given signal-to-noise ratio.
    Noise { snr_db: f64 },
    /// Tempo change; durations scale by `factor` (> 1 lengthens).
    TimeStretch { factor: f64 },
    /// Vocal tract length perturbation with warp factor `alpha`.
    Vtlp { alpha: f64 },
    /// Circular shift; positive values move content later.
    TimeShift { shift_s: f64, min_fragment_s: f64 },
}

pub fn augment_waveform<R: Rng>(clip: &AudioClip, op: &WaveAugment, rng: &mut R) -> Result<AudioClip> {
    match *op {
        WaveAugment::Noise { snr_db } => Ok(add_noise(clip, snr_db, rng)),
        WaveAugment::TimeStretch { factor } => time_stretch(clip, factor),
        WaveAugment::Vtlp { alpha } => vtlp(clip, alpha),
        WaveAugment::TimeShift {
            shift_s,
            min_fragment_s,
        } => time_shift(clip, shift_s, min_fragment_s),
    }
}

fn add_noise<R: Rng>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> AudioClip {
    let n = clip.samples.len().max(1) as f64;
    let power = clip.samples.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut out = clip.clone();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for x in &mut out.samples {
            *x = (*x as f64 + normal.sample(rng)).clamp(-1.0, 1.0) as f32;
        }
    }
    out
}

fn time_shift(clip: &AudioClip, shift_s: f64, min_fragment_s: f64) -> Result<AudioClip> {
    let dur = clip.duration_s();
    if !(shift_s.abs() <= dur) {
        return Err(Error::Domain(format!(
            "shift {shift_s} s exceeds clip duration {dur} s"
        )));
    }
    let n = clip.samples.len();
    let sr = clip.sample_rate as f64;
    let k = ((shift_s * sr).round() as i64).rem_euclid(n.max(1) as i64) as usize;
    let mut samples = vec![0.0; n];
    for (i, &x) in clip.samples.iter().enumerate() {
        samples[(i + k) % n] = x;
    }
    let delta = k as f64 / sr;
    let mut events = Vec::new();
    for ev in &clip.events {
        for (on, off) in shift_interval(ev.onset_s, ev.offset_s, delta, dur) {
            if off - on >= min_fragment_s && off > on {
                events.push(EventRecord {
                    onset_s: on,
                    offset_s: off,
                    ..ev.clone()
                });
            }
        }
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(AudioClip {
        samples,
        events,
        ..clip.clone()
    })
}

/// Moves `[on, off]` by `delta` (in `[0, dur)`) on a circle of length `dur`,
/// splitting it at the wrap point.
pub(crate) fn shift_interval(on: f64, off: f64, delta: f64, dur: f64) -> Vec<(f64, f64)> {
    let (mut s, mut e) = (on + delta, off + delta);
    if s >= dur {
        s -= dur;
        e -= dur;
    }
    if e <= dur {
        vec![(s, e)]
    } else {
        vec![(s, dur), (0.0, e - dur)]
    }
}

fn time_stretch(clip: &AudioClip, factor: f64) -> Result<AudioClip> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Domain(format!("stretch factor must be > 0, got {factor}")));
    }
    const WIN: usize = 512;
    const HOP_OUT: usize = 128;
    let n = clip.samples.len();
    let out_len = ((n as f64) * factor).round() as usize;
    let hop_in = HOP_OUT as f64 / factor;
    let window: Vec<f64> = (0..WIN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN as f64).cos())
        .collect();
    let mut acc = vec![0.0f64; out_len + WIN];
    let mut norm = vec![0.0f64; out_len + WIN];
    let mut j = 0usize;
    while j * HOP_OUT < out_len + WIN / 2 {
        let src = (j as f64 * hop_in).round() as isize - (WIN / 2) as isize;
        let dst = j as isize * HOP_OUT as isize - (WIN / 2) as isize;
        for i in 0..WIN {
            let (si, di) = (src + i as isize, dst + i as isize);
            if di < 0 || di as usize >= out_len {
                continue;
            }
            let x = if si >= 0 && (si as usize) < n {
                clip.samples[si as usize] as f64
            } else {
                0.0
            };
            acc[di as usize] += x * window[i];
            norm[di as usize] += window[i];
        }
        j += 1;
    }
    let samples = (0..out_len)
        .map(|i| {
            if norm[i] > 1e-8 {
                (acc[i] / norm[i]) as f32
            } else {
                0.0
            }
        })
        .collect::<Vec<f32>>();
    let new_dur = out_len as f64 / clip.sample_rate as f64;
    let events = clip
        .events
        .iter()
        .filter_map(|ev| {
            let on = (ev.onset_s * factor).min(new_dur);
            let off = (ev.offset_s * factor).min(new_dur);
            (off > on).then(|| EventRecord {
                onset_s: on,
                offset_s: off,
                ..ev.clone()
            })
        })
        .collect();
    Ok(AudioClip {
        samples,
        events,
        ..clip.clone()
    })
}

/// Piecewise-linear frequency warp: scale by `alpha` below a boundary, then
/// a linear segment that pins Nyquist.
fn warp_frequency(f: f64, alpha: f64, nyquist: f64) -> f64 {
    let f_hi = 0.6 * nyquist;
    let boundary = f_hi * alpha.min(1.0) / alpha;
    if f <= boundary {
        f * alpha
    } else {
        nyquist - (nyquist - f_hi * alpha.min(1.0)) / (nyquist - boundary) * (nyquist - f)
    }
}

fn vtlp(clip: &AudioClip, alpha: f64) -> Result<AudioClip> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("VTLP alpha must be > 0, got {alpha}")));
    }
    const N_FFT: usize = 512;
    const HOP: usize = 128;
    let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
    let spec = stft(&x, N_FFT, N_FFT, HOP);
    let nyquist = clip.sample_rate as f64 / 2.0;
    let bins = N_FFT / 2 + 1;
    let bin_hz = nyquist / (bins - 1) as f64;
    let warped: Vec<Vec<Complex<f64>>> = spec
        .iter()
        .map(|frame| {
            let mut out = vec![Complex::new(0.0, 0.0); bins];
            for (k, &v) in frame.iter().enumerate() {
                let pos = warp_frequency(k as f64 * bin_hz, alpha, nyquist) / bin_hz;
                let lo = pos.floor() as usize;
                let w = pos - lo as f64;
                if lo < bins {
                    out[lo] += v * (1.0 - w);
                }
                if lo + 1 < bins {
                    out[lo + 1] += v * w;
                }
            }
            out
        })
        .collect();
    let y = istft(&warped, N_FFT, N_FFT, HOP, x.len());
    Ok(AudioClip {
        samples: y.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        ..clip.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn clip_with(events: &[(f64, f64)]) -> AudioClip {
        AudioClip::new("c", vec![0.0; 80000], 8000).with_events(
            events
                .iter()
                .map(|&(a, b)| EventRecord::new(a, b, "wheeze"))
                .collect(),
        )
    }

    fn spans(c: &AudioClip) -> Vec<(f64, f64)> {
        // round to microseconds so float drift does not break equality
        let r = |v: f64| (v * 1e6).round() / 1e6;
        c.events.iter().map(|e| (r(e.onset_s), r(e.offset_s))).collect()
    }

    fn shift(c: &AudioClip, s: f64) -> AudioClip {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let op = WaveAugment::TimeShift {
            shift_s: s,
            min_fragment_s: MIN_FRAGMENT_S,
        };
        augment_waveform(c, &op, &mut rng).unwrap()
    }

    #[test]
    fn shift_translates_and_wraps() {
        assert_eq!(spans(&shift(&clip_with(&[(1.0, 2.0)]), 2.0)), vec![(3.0, 4.0)]);
        assert_eq!(spans(&shift(&clip_with(&[(8.5, 9.5)]), 2.0)), vec![(0.5, 1.5)]);
        assert_eq!(spans(&shift(&clip_with(&[(9.0, 10.0)]), 2.0)), vec![(1.0, 2.0)]);
        assert_eq!(
            spans(&shift(&clip_with(&[(8.5, 9.5)]), 1.0)),
            vec![(0.0, 0.5), (9.5, 10.0)]
        );
        // negative shift wraps the other way
        assert_eq!(
            spans(&shift(&clip_with(&[(0.2, 1.0)]), -0.5)),
            vec![(0.0, 0.5), (9.7, 10.0)]
        );
    }

    #[test]
    fn shift_drops_tiny_fragments() {
        // (9.0, 9.98) + 1.0 leaves a 20 ms tail after the wrap
        let out = shift(&clip_with(&[(8.98, 9.98)]), 1.0);
        assert_eq!(spans(&out).len(), 1);
    }

    #[test]
    fn shift_rolls_samples() {
        let mut c = AudioClip::new("c", vec![0.0; 16], 8);
        c.samples[0] = 1.0;
        let out = shift(&c, 0.5);
        assert_eq!(out.samples[4], 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let op = WaveAugment::TimeShift {
            shift_s: 3.0,
            min_fragment_s: 0.0,
        };
        assert!(augment_waveform(&c, &op, &mut rng).is_err());
    }

    #[test]
    fn stretch_rescales_events() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = augment_waveform(
            &clip_with(&[(1.0, 2.0)]),
            &WaveAugment::TimeStretch { factor: 1.25 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(spans(&out), vec![(1.25, 2.5)]);
        assert_eq!(out.samples.len(), 100000);
        for f in [0.0, -1.0] {
            assert!(augment_waveform(&out, &WaveAugment::TimeStretch { factor: f }, &mut rng).is_err());
        }
    }

    #[test]
    fn noise_and_vtlp_keep_events() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut c = clip_with(&[(1.0, 2.0)]);
        for (i, x) in c.samples.iter_mut().enumerate() {
            *x = (i as f32 * 0.05).sin() * 0.5;
        }
        let noisy = augment_waveform(&c, &WaveAugment::Noise { snr_db: 10.0 }, &mut rng).unwrap();
        assert_eq!(noisy.events, c.events);
        assert_ne!(noisy.samples, c.samples);
        let warped = augment_waveform(&c, &WaveAugment::Vtlp { alpha: 1.1 }, &mut rng).unwrap();
        assert_eq!(warped.events, c.events);
        assert_eq!(warped.samples.len(), c.samples.len());
        assert!(warped.samples.iter().all(|v| v.is_finite()));
        // identity warp reconstructs the input
        let same = augment_waveform(&c, &WaveAugment::Vtlp { alpha: 1.0 }, &mut rng).unwrap();
        let err = same
            .samples
            .iter()
            .zip(&c.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn warp_pins_endpoints() {
        for alpha in [0.9, 1.0, 1.1] {
            assert_eq!(warp_frequency(0.0, alpha, 4000.0), 0.0);
            assert!((warp_frequency(4000.0, alpha, 4000.0) - 4000.0).abs() < 1e-9);
        }
    }
}
