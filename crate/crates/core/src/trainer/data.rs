//! Per-epoch graph sources, with optional on-the-fly augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    augment_waveform, compute_stack, mask_spectrogram, row_normalize, AudioClip, FeatureConfig, MaskAxis,
    WaveAugment, MIN_FRAGMENT_S,
};
use crate::graphify::{build_clip_graph, ClipGraph, GraphInput, MetaVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Per-clip probability of a waveform op, and separately of masking.
    pub p: f64,
    pub noise_snr_db: [f64; 2],
    pub stretch: [f64; 2],
    pub vtlp_alpha: [f64; 2],
    /// Largest circular shift as a fraction of clip duration.
    pub max_shift_fraction: f64,
    pub time_mask_width: usize,
    pub time_mask_count: usize,
    pub freq_mask_width: usize,
    pub freq_mask_count: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 0.5,
            noise_snr_db: [10.0, 30.0],
            stretch: [0.9, 1.1],
            vtlp_alpha: [0.9, 1.1],
            max_shift_fraction: 0.5,
            time_mask_width: 10,
            time_mask_count: 2,
            freq_mask_width: 8,
            freq_mask_count: 2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config("augment.p must lie in [0, 1]".into()));
        }
        if !(ordered(&self.noise_snr_db) && ordered(&self.stretch) && ordered(&self.vtlp_alpha)) {
            return Err(Error::Config("augment ranges must be finite [lo, hi] pairs".into()));
        }
        if self.stretch[0] <= 0.0 || self.vtlp_alpha[0] <= 0.0 {
            return Err(Error::Config("stretch and VTLP factors must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_shift_fraction) {
            return Err(Error::Config("augment.max_shift_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws one random waveform op.
    pub fn sample_op<R: Rng>(&self, duration_s: f64, rng: &mut R) -> WaveAugment {
        let uni = |rng: &mut R, r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
        match rng.random_range(0..4) {
            0 => WaveAugment::Noise { snr_db: uni(rng, self.noise_snr_db) },
            1 => WaveAugment::TimeStretch { factor: uni(rng, self.stretch) },
            2 => WaveAugment::Vtlp { alpha: uni(rng, self.vtlp_alpha) },
            _ => {
                let m = self.max_shift_fraction * duration_s;
                WaveAugment::TimeShift {
                    shift_s: uni(rng, [-m, m]),
                    min_fragment_s: MIN_FRAGMENT_S,
                }
            }
        }
    }
}

/// Everything needed to turn an [`AudioClip`] into a [`ClipGraph`].
#[derive(Debug, Clone)]
pub struct GraphPipeline {
    pub features: FeatureConfig,
    pub classes: Vec<String>,
    pub group: usize,
    pub meta: Option<MetaVocab>,
}

impl GraphPipeline {
    /// Stack, row-normalize, optionally mask, then graphify.
    pub fn build<R: Rng>(&self, clip: &AudioClip, masks: Option<(&AugmentConfig, &mut R)>) -> Result<ClipGraph> {
        let mut stack = row_normalize(&compute_stack(clip, &self.features)?);
        if let Some((aug, rng)) = masks {
            let (axis, width, count) = if rng.random_bool(0.5) {
                (MaskAxis::Time, aug.time_mask_width, aug.time_mask_count)
            } else {
                (MaskAxis::Frequency, aug.freq_mask_width, aug.freq_mask_count)
            };
            let extent = if axis == MaskAxis::Time { stack.frames() } else { stack.bands() };
            if width < extent {
                stack = mask_spectrogram(&stack, axis, width, count, rng)?;
            }
        }
        build_clip_graph(
            GraphInput {
                id: &clip.id,
                stack: &stack,
                events: &clip.events,
                meta: self.meta.as_ref().map(|v| (v, &clip.meta)),
            },
            &self.classes,
            self.group,
        )
    }
}

/// Supplies the training graphs for each epoch.
pub trait EpochSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn epoch_graphs(&mut self, epoch: usize) -> Result<Vec<ClipGraph>>;
}

/// The same precomputed graphs every epoch.
pub struct StaticSource(pub Vec<ClipGraph>);

impl EpochSource for StaticSource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn epoch_graphs(&mut self, _epoch: usize) -> Result<Vec<ClipGraph>> {
        Ok(self.0.clone())
    }
}

/// Rebuilds graphs each epoch from audio, augmenting each clip
/// independently with probability `p`.
pub struct AugmentedSource {
    clips: Vec<AudioClip>,
    pipeline: GraphPipeline,
    augment: AugmentConfig,
    /// Un-augmented graphs reused when a clip draws no augmentation.
    clean: Vec<ClipGraph>,
    rng: ChaCha8Rng,
}

impl AugmentedSource {
    pub fn new(clips: Vec<AudioClip>, pipeline: GraphPipeline, augment: AugmentConfig, seed: u64) -> Result<Self> {
        augment.validate()?;
        let clean = clips
            .iter()
            .map(|c| pipeline.build::<ChaCha8Rng>(c, None))
            .collect::<Result<_>>()?;
        Ok(Self {
            clips,
            pipeline,
            augment,
            clean,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl EpochSource for AugmentedSource {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn epoch_graphs(&mut self, _epoch: usize) -> Result<Vec<ClipGraph>> {
        if !self.augment.enabled {
            return Ok(self.clean.clone());
        }
        let mut out = Vec::with_capacity(self.clips.len());
        for (clip, clean) in self.clips.iter().zip(&self.clean) {
            let wave = self.rng.random_bool(self.augment.p);
            let mask = self.rng.random_bool(self.augment.p);
            if !wave && !mask {
                out.push(clean.clone());
                continue;
            }
            let source = if wave {
                let op = self.augment.sample_op(clip.duration_s(), &mut self.rng);
                log::debug!("{}: {:?}", clip.id, op);
                augment_waveform(clip, &op, &mut self.rng)?
            } else {
                clip.clone()
            };
            let g = if mask {
                self.pipeline.build(&source, Some((&self.augment, &mut self.rng)))?
            } else {
                self.pipeline.build::<ChaCha8Rng>(&source, None)?
            };
            out.push(g);
        }
        Ok(out)
    }
}

/// Shuffled clip-count batches of indices.
pub fn batch_indices<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
