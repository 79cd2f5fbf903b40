#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respsed::detector::DetectorConfig;
use respsed::events::EventRecord;
use respsed::features::SpectrogramStack;
use respsed::graphify::{build_clip_graph, ClipGraph, GraphInput};

/// A detector small enough for fast CPU tests.
pub fn small_cfg() -> DetectorConfig {
    let mut cfg = DetectorConfig::default();
    cfg.model.conv_channels = vec![4, 4, 4];
    cfg.model.n_basis = 2;
    cfg.model.d_node = 8;
    cfg.model.bands = 64;
    cfg
}

pub fn random_stack(bands: usize, frames: usize, rng: &mut impl Rng) -> SpectrogramStack {
    let n = (frames - 1) * 128;
    SpectrogramStack {
        values: Array3::from_shape_fn((3, bands, frames), |_| rng.random_range(-1.0..1.0)),
        frame_times: (0..frames).map(|j| j as f64 * 128.0 / 8000.0).collect(),
        source_duration_s: n as f64 / 8000.0,
        n_samples: n,
        hop_len: 128,
    }
}

/// Random-valued graphs of the given frame counts with a few events each.
pub fn random_graphs(cfg: &DetectorConfig, frames: &[usize], seed: u64) -> Vec<ClipGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    frames
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let st = random_stack(cfg.model.bands, f, &mut rng);
            let dur = st.source_duration_s;
            let k = rng.random_range(0..=3);
            let events: Vec<EventRecord> = (0..k)
                .map(|_| {
                    let on = rng.random_range(0.0..dur * 0.8);
                    let off = (on + rng.random_range(0.1..dur * 0.3)).min(dur);
                    let label = cfg.classes[rng.random_range(0..cfg.classes.len())].clone();
                    EventRecord::new(on, off, label)
                })
                .collect();
            build_clip_graph(
                GraphInput { id: &format!("clip{i}"), stack: &st, events: &events, meta: None },
                &cfg.classes,
                cfg.model.group,
            )
            .unwrap()
        })
        .collect()
}
