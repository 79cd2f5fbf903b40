//! Synthetic clips: low-level white noise with band-limited bursts whose
//! frequency band identifies the class. Used for smoke runs and overfit
//! checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventRecord;
use crate::features::AudioClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstClass {
    pub label: String,
    pub f_lo: f64,
    pub f_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub classes: Vec<BurstClass>,
    /// Inclusive range of bursts per clip.
    pub events_per_clip: [usize; 2],
    pub event_len_s: [f64; 2],
    pub burst_amplitude: f64,
    pub noise_std: f64,
    /// Sinusoids summed per burst.
    pub partials: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            sample_rate: 8000,
            classes: vec![
                BurstClass { label: "wheeze".into(), f_lo: 300.0, f_hi: 600.0 },
                BurstClass { label: "crackle".into(), f_lo: 1500.0, f_hi: 2500.0 },
            ],
            events_per_clip: [2, 3],
            event_len_s: [0.6, 1.4],
            burst_amplitude: 0.3,
            noise_std: 0.01,
            partials: 24,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate as f64 / 2.0;
        if self.classes.is_empty() || self.classes.iter().any(|c| !(0.0 < c.f_lo && c.f_lo < c.f_hi && c.f_hi < nyq)) {
            return Err(Error::Config("burst bands must satisfy 0 < f_lo < f_hi < nyquist".into()));
        }
        let [lo, hi] = self.events_per_clip;
        if lo == 0 || lo > hi {
            return Err(Error::Config("events_per_clip must be a [lo, hi] range with lo >= 1".into()));
        }
        let slot = self.duration_s / hi as f64;
        if !(self.event_len_s[0] > 0.0 && self.event_len_s[0] <= self.event_len_s[1] && self.event_len_s[1] < slot) {
            return Err(Error::Config(format!(
                "event lengths must be positive and shorter than the {slot:.2} s slot"
            )));
        }
        Ok(())
    }
}

/// One clip whose bursts occupy disjoint, equally sized time slots.
pub fn synth_clip<R: Rng>(id: &str, cfg: &SynthConfig, rng: &mut R) -> Result<AudioClip> {
    cfg.validate()?;
    let sr = cfg.sample_rate as f64;
    let n = (cfg.duration_s * sr).round() as usize;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
    let k = rng.random_range(cfg.events_per_clip[0]..=cfg.events_per_clip[1]);
    let slot = cfg.duration_s / k as f64;
    let mut events = Vec::with_capacity(k);
    for s in 0..k {
        let class = &cfg.classes[rng.random_range(0..cfg.classes.len())];
        let len = if cfg.event_len_s[0] < cfg.event_len_s[1] {
            rng.random_range(cfg.event_len_s[0]..cfg.event_len_s[1])
        } else {
            cfg.event_len_s[0]
        };
        let onset = s as f64 * slot + rng.random_range(0.0..(slot - len));
        let (a, b) = ((onset * sr).round() as usize, (((onset + len) * sr).round() as usize).min(n));
        let partials: Vec<(f64, f64)> = (0..cfg.partials)
            .map(|_| (rng.random_range(class.f_lo..class.f_hi), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let gain = cfg.burst_amplitude / (cfg.partials as f64).sqrt();
        let ramp = ((0.01 * sr) as usize).max(1);
        for (j, x) in samples[a..b].iter_mut().enumerate() {
            let t = (a + j) as f64 / sr;
            let edge = j.min(b - a - 1 - j);
            let env = (edge as f64 / ramp as f64).min(1.0);
            let v: f64 = partials.iter().map(|(f, ph)| (std::f64::consts::TAU * f * t + ph).sin()).sum();
            *x += env * gain * v;
        }
        events.push(EventRecord::new(a as f64 / sr, b as f64 / sr, class.label.clone()));
    }
    let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(AudioClip::new(id, samples, cfg.sample_rate).with_events(events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bursts_are_disjoint_and_inside() {
        let cfg = SynthConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for i in 0..20 {
            let c = synth_clip(&format!("s{i}"), &cfg, &mut rng).unwrap();
            assert_eq!(c.samples.len(), 80_000);
            let k = c.events.len();
            assert!((2..=3).contains(&k));
            for w in c.events.windows(2) {
                assert!(w[0].offset_s <= w[1].onset_s);
            }
            assert!(c.events.iter().all(|e| e.onset_s >= 0.0 && e.offset_s <= 10.0 && e.duration() > 0.5));
        }
    }

    #[test]
    fn silence_outside_bursts_without_noise() {
        let cfg = SynthConfig { noise_std: 0.0, ..SynthConfig::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = synth_clip("x", &cfg, &mut rng).unwrap();
        let e = &c.events[0];
        let inside: f64 = c.samples[(e.onset_s * 8000.0) as usize..(e.offset_s * 8000.0) as usize]
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum();
        assert!(inside > 0.0);
        let before: f64 = c.samples[..(e.onset_s * 8000.0) as usize].iter().map(|&v| (v as f64).powi(2)).sum();
        assert_eq!(before, 0.0);
    }
}
