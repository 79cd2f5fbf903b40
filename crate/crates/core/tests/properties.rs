mod common;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use respsed::anchors::{generate, iou, AnchorConfig};
use respsed::cli::manifest::{Manifest, ManifestEvent, ManifestRecord};
use respsed::events::{match_events, metrics, CollarConfig, EventRecord, Matching};
use respsed::features::{
    augment_waveform, compute_stack, mask_spectrogram, row_normalize, AudioClip, FeatureConfig, MaskAxis,
    WaveAugment,
};
use respsed::graphify::collate;
use respsed::refiner::{refine_interval, soft_offset};

fn events(max: usize) -> impl Strategy<Value = Vec<EventRecord>> {
    prop::collection::vec((0.0f64..8.0, 0.05f64..2.0), 0..=max)
        .prop_map(|v| v.into_iter().map(|(on, d)| EventRecord::new(on, on + d, "wheeze")).collect())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn frame_count_follows_centered_framing(n in 1000usize..6000) {
        let cfg = FeatureConfig { n_bands: 32, channels: vec![respsed::features::Channel::Mel], ..FeatureConfig::default() };
        let st = compute_stack(&AudioClip::new("x", vec![0.1; n], 8000), &cfg).unwrap();
        prop_assert_eq!(st.frames(), 1 + n / cfg.hop_len);
        prop_assert_eq!(st.frame_times.len(), st.frames());
    }

    #[test]
    fn row_normalize_is_idempotent(bands in 1usize..20, frames in 2usize..50, seed: u64) {
        let st = common::random_stack(bands, frames, &mut ChaCha8Rng::seed_from_u64(seed));
        let once = row_normalize(&st);
        let twice = row_normalize(&once);
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        for row in once.values.rows() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn time_shift_conserves_event_duration(evs in events(4), shift in -9.9f64..9.9) {
        let clip = AudioClip::new("s", vec![0.0; 80_000], 8000).with_events(
            evs.into_iter().map(|e| EventRecord::new(e.onset_s, e.offset_s.min(10.0), e.label)).collect(),
        );
        let out = augment_waveform(
            &clip,
            &WaveAugment::TimeShift { shift_s: shift, min_fragment_s: 0.0 },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let before: f64 = clip.events.iter().map(|e| e.duration()).sum();
        let after: f64 = out.events.iter().map(|e| e.duration()).sum();
        prop_assert!((before - after).abs() < 1e-9);
        prop_assert!(out.events.iter().all(|e| e.onset_s >= 0.0 && e.offset_s <= 10.0 + 1e-12));
        prop_assert!(out.events.len() >= clip.events.len() && out.events.len() <= 2 * clip.events.len());
    }

    #[test]
    fn masks_touch_at_most_count_times_width_frames(width in 1usize..6, count in 0usize..4, seed: u64) {
        let st = row_normalize(&common::random_stack(8, 30, &mut ChaCha8Rng::seed_from_u64(seed)));
        let out = mask_spectrogram(&st, MaskAxis::Time, width, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let changed = (0..30)
            .filter(|&j| (0..8).any(|b| out.values[[0, b, j]] != st.values[[0, b, j]]))
            .count();
        prop_assert!(changed <= count * width);
    }

    #[test]
    fn anchors_are_counted_and_inside_the_clip(l in 0.5f64..30.0) {
        let set = generate(l, &AnchorConfig::default()).unwrap();
        prop_assert_eq!(set.len(), 70);
        for a in &set.anchors {
            prop_assert!(0.0 <= a.start && a.start < a.end && a.end <= l);
            prop_assert!(0.0 <= a.alpha && a.beta <= 1.0);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in 0.0f64..10.0, da in 0.01f64..5.0, b in 0.0f64..10.0, db in 0.01f64..5.0) {
        let (x, y) = ((a, a + da), (b, b + db));
        prop_assert!((iou(x, y) - iou(y, x)).abs() < 1e-15);
        prop_assert!((0.0..1.0).contains(&iou(x, y)));
        // the 1e-6 union guard keeps self-overlap just below one
        prop_assert!((iou(x, x) - da / (da + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn refined_intervals_stay_ordered_and_clamped(
        s in 0.0f64..10.0, w in 0.0f64..5.0, ds in -30.0f64..30.0, de in -30.0f64..30.0, l in 1.0f64..20.0,
    ) {
        let (rs, re) = refine_interval(s, s + w, ds, de, l);
        prop_assert!(0.0 <= rs && rs <= re && re <= l);
    }

    #[test]
    fn soft_offset_lies_between_extreme_centers(u in prop::collection::vec(-50.0f64..50.0, 2..10), range in 0.1f64..20.0) {
        let b = u.len();
        let centers: Vec<f64> = (0..b).map(|i| -range + 2.0 * range * i as f64 / (b - 1) as f64).collect();
        let d = soft_offset(
            &Tensor::from_slice(&u, (1, b), &Device::Cpu).unwrap(),
            &Tensor::from_slice(&centers, b, &Device::Cpu).unwrap(),
        )
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[0];
        prop_assert!(-range - 1e-12 <= d && d <= range + 1e-12);
    }

    #[test]
    fn metric_identities(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = metrics(tp, fp, fn_, tp + fn_);
        prop_assert_eq!(m.s + m.d + m.i, fp.max(fn_));
        if tp > 0 {
            let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - harmonic).abs() < 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn matching_conserves_counts_and_ignores_input_order(
        refs in events(5), syss in events(5), seed: u64,
    ) {
        use rand::seq::SliceRandom;
        let greedy = CollarConfig::default();
        let optimal = CollarConfig { matching: Matching::Optimal, ..greedy };
        for collar in [greedy, optimal] {
            let c = match_events(&refs, &syss, &collar);
            prop_assert_eq!(c.tp + c.fn_, refs.len());
            prop_assert_eq!(c.tp + c.fp, syss.len());
            // continuous onsets are distinct, so the sorted order is unique
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut r2, mut s2) = (refs.clone(), syss.clone());
            r2.shuffle(&mut rng);
            s2.shuffle(&mut rng);
            prop_assert_eq!(match_events(&r2, &s2, &collar), c);
        }
        prop_assert!(match_events(&refs, &syss, &greedy).tp <= match_events(&refs, &syss, &optimal).tp);
    }

    #[test]
    fn collate_offsets_and_edges_stay_within_clips(frames in prop::collection::vec(6usize..60, 1..5), seed: u64) {
        let cfg = common::small_cfg();
        let graphs = common::random_graphs(&cfg, &frames.iter().map(|f| f.max(&30)).copied().collect::<Vec<_>>(), seed);
        let b = collate(&graphs).unwrap();
        prop_assert_eq!(b.offsets.len(), graphs.len() + 1);
        for (k, g) in graphs.iter().enumerate() {
            prop_assert_eq!(b.offsets[k + 1] - b.offsets[k], g.n_nodes());
            prop_assert!(b.batch[b.nodes_of(k)].iter().all(|&c| c == k));
        }
        for &(s, d) in &b.edge_index {
            prop_assert_eq!(b.batch[s], b.batch[d]);
            prop_assert_eq!(d, s + 1);
        }
        prop_assert_eq!(b.edge_index.len(), b.n_nodes() - graphs.len());
    }

    #[test]
    fn manifest_round_trips(
        recs in prop::collection::vec(("[a-z]{1,8}", 1.0f64..20.0, prop::option::of("[a-z]{1,4}"), events(3)), 1..5),
    ) {
        let records: Vec<ManifestRecord> = recs
            .into_iter()
            .enumerate()
            .map(|(i, (name, dur, pos, evs))| ManifestRecord {
                id: format!("{name}{i}"),
                audio: format!("audio/{name}{i}.wav").into(),
                sample_rate: 8000,
                duration_s: dur,
                events: evs
                    .into_iter()
                    .map(|e| ManifestEvent { onset_s: e.onset_s, offset_s: e.offset_s, label: e.label })
                    .collect(),
                position: pos,
                gender: None,
                split: "train".into(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest { records, root: dir.path().to_path_buf() };
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(back.to_jsonl().unwrap(), m.to_jsonl().unwrap());
    }
}
