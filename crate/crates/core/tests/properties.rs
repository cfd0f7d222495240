mod common;

use fsan::alignment::{map_to_csv, parse_map_csv, AlignmentMap};
use fsan::data_io::{decode_features, encode_features, generate_synthetic, SyntheticConfig};
use fsan::encoders::{bin_ranges, pool_video, Pooling};
use fsan::eval_metrics::{iou, recall_at_k, Interval};
use fsan::grounding::{rank_segments, score_all_bruteforce, score_all_fast, ScorerOptions};
use fsan::objectives::{
    hinge, inner_sample_loss, matching_loss, matching_score_var, outer_sample_loss, total_loss, LossWeights, MapVar,
    OuterLossForm, SpanWeights, TripletConfig,
};
use fsan::grounding::enumerate_segments;
use fsan::tensor::{decode_checkpoint, encode_checkpoint, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use common::random_map;

fn shifted(map: &AlignmentMap, f: impl Fn(f64) -> f64) -> AlignmentMap {
    AlignmentMap::with_mask(map.values().map(f), map.row_mask().to_vec()).unwrap()
}

fn f32_exact(t: &Tensor) -> Tensor {
    t.map(|x| x as f32 as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fast_scorer_equals_oracle(seed in any::<u64>(), full in any::<bool>()) {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 12, 16);
        let opts = ScorerOptions { include_full_span: full };
        let fast = score_all_fast(&map, opts).unwrap();
        let slow = score_all_bruteforce(&map, opts).unwrap();
        prop_assert_eq!(fast.len(), slow.len());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_shift_with_constants_except_the_full_span(seed in any::<u64>(), c in -3.0f64..3.0) {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 12, 16);
        let base = score_all_fast(&map, ScorerOptions::default()).unwrap();
        let moved = score_all_fast(&shifted(&map, |x| x + c), ScorerOptions::default()).unwrap();
        let n = map.n_clips();
        for (g, v) in base.iter() {
            let w = moved.get(g.s, g.e).unwrap();
            if g.len() < n {
                prop_assert!((w - v).abs() < 1e-9, "{g:?}: {v} vs {w}");
            } else {
                prop_assert!((w - v - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn positive_scaling_scales_scores_and_keeps_ranking(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 12, 16);
        let base = score_all_fast(&map, ScorerOptions::default()).unwrap();
        let scaled = score_all_fast(&shifted(&map, |x| alpha * x), ScorerOptions::default()).unwrap();
        for (g, v) in base.iter() {
            prop_assert!((scaled.get(g.s, g.e).unwrap() - alpha * v).abs() < 1e-9 * alpha.max(1.0));
        }
        prop_assert_eq!(rank_segments(&base)[0].0, rank_segments(&scaled)[0].0);
    }

    #[test]
    fn ranking_is_deterministic(seed in any::<u64>()) {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 6, 8);
        let a = rank_segments(&score_all_fast(&map, ScorerOptions::default()).unwrap());
        let b = rank_segments(&score_all_fast(&map.clone(), ScorerOptions::default()).unwrap());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn masked_rows_never_reach_scores_or_losses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, 8, 10);
        let mut other = map.values().clone();
        for i in (0..map.n_tokens()).filter(|&i| !map.row_mask()[i]) {
            for j in 0..map.n_clips() {
                other.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
        let other = AlignmentMap::with_mask(other, map.row_mask().to_vec()).unwrap();
        let opts = ScorerOptions::default();
        let table = score_all_fast(&map, opts).unwrap();
        prop_assert!(table.max_abs_diff(&score_all_fast(&other, opts).unwrap()) < 1e-12);

        let segments = enumerate_segments(map.n_clips(), opts);
        let eval = |m: &AlignmentMap| {
            let mut tape = Tape::new();
            let v = tape.leaf(m.values().clone());
            let mv = MapVar::new(&tape, v, m.row_mask()).unwrap();
            let s = matching_score_var(&mut tape, &mv, opts).unwrap();
            let w = SpanWeights::Frozen(&table);
            let li = inner_sample_loss(&mut tape, &mv, &w, &segments, false).unwrap();
            let lo = outer_sample_loss(&mut tape, &mv, &w, &segments, OuterLossForm::AsWritten).unwrap();
            [s, li, lo].map(|x| tape.value(x).item().unwrap())
        };
        let (a, b) = (eval(&map), eval(&other));
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_maps_are_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::tiny_model(seed % 8);
        let frames = Tensor::randn(&[rng.random_range(1..12), 5], 1.0, &mut rng);
        let clips = model.clips(&frames, 10.0).unwrap();
        let n = rng.random_range(1..6);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let map = model.infer_map(&ids, &clips).unwrap();
        prop_assert_eq!(map.values().shape(), &[n, 4]);
        prop_assert!(map.values().data().iter().all(|x| x.abs() <= 1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, n) = (rng.random_range(1..7), rng.random_range(1..7));
        let x = Tensor::randn(&[r, n], 3.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.map(|v| v + c));
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let (sa, sb) = (tape.value(sa), tape.value(sb));
        for i in 0..r {
            prop_assert!((sa.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(sa.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(sa.max_abs_diff(sb) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d) = (rng.random_range(1..7), rng.random_range(2..9));
        let x = Tensor::randn(&[r, d], 10.0, &mut rng).map(|v| v + 5.0);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let g = tape.leaf(Tensor::filled(&[d], 1.0));
        let b = tape.leaf(Tensor::zeros(&[d]));
        let y = tape.layer_norm(a, g, b, 1e-5).unwrap();
        let y = tape.value(y);
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / d as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
        };
        for i in 0..r {
            let (mean, var) = moments(y.row(i));
            prop_assert!(mean.abs() < 1e-10);
            // eps shifts the variance by about eps / var_in.
            if moments(x.row(i)).1 >= 10.0 {
                prop_assert!((var - 1.0).abs() < 1e-6, "variance {var}");
            }
        }
    }

    #[test]
    fn pooling_partitions_frames_and_keeps_shape(t in 1usize..60, n in 1usize..20, d in 1usize..5) {
        if t >= n {
            let bins = bin_ranges(t, n);
            prop_assert_eq!(bins.len(), n);
            prop_assert_eq!(bins[0].start, 0);
            prop_assert_eq!(bins[n - 1].end, t);
            prop_assert!(bins.windows(2).all(|w| w[0].end == w[1].start && w[0].len() >= w[1].len()));
            prop_assert!(bins.iter().all(|b| !b.is_empty()));
        }
        let frames = Tensor::randn(&[t, d], 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64));
        let clips = pool_video(&frames, n, t as f64, Pooling::Mean).unwrap();
        prop_assert_eq!(clips.features.shape(), &[n, d]);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0f64..50.0, 0.0f64..50.0), b in (0.0f64..50.0, 0.0f64..50.0)) {
        let a = (a.0.min(a.1), a.0.max(a.1));
        let b = (b.0.min(b.1), b.0.max(b.1));
        prop_assert_eq!(iou(a, b).to_bits(), iou(b, a).to_bits());
        prop_assert!((0.0..=1.0).contains(&iou(a, b)));
    }

    #[test]
    fn feature_files_round_trip_at_f32(seed in any::<u64>(), t in 1usize..20, d in 1usize..12) {
        let x = Tensor::randn(&[t, d], 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let buf = encode_features(&x).unwrap();
        let back = decode_features(&buf, Path::new("mem")).unwrap();
        prop_assert_eq!(back, f32_exact(&x));
    }

    #[test]
    fn checkpoints_round_trip_at_f32(seed in any::<u64>(), n in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..n {
            let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
            store.add(format!("layer{i}.w"), Tensor::randn(&shape, 1.0, &mut rng));
        }
        let back = decode_checkpoint(&encode_checkpoint(&store).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.names(), store.names());
        for (a, b) in back.tensors().iter().zip(store.tensors()) {
            prop_assert_eq!(a, &f32_exact(b));
        }
    }

    #[test]
    fn map_csv_round_trips_at_six_decimals(seed in any::<u64>()) {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 6, 8);
        let tokens: Vec<String> = (0..map.n_tokens()).map(|i| format!("t{i}")).collect();
        let (names, values) = parse_map_csv(&map_to_csv(&map, &tokens).unwrap()).unwrap();
        prop_assert_eq!(names, tokens);
        prop_assert!(values.max_abs_diff(map.values()) <= 5e-7 + 1e-15);
    }

    #[test]
    fn total_loss_is_linear(l in prop::array::uniform3(-5.0f64..5.0), raw in prop::array::uniform3(0.0f64..1.0)) {
        let sum: f64 = raw.iter().sum::<f64>().max(1e-9);
        let lam = raw.map(|x| x / sum);
        let last = 1.0 - lam[0] - lam[1];
        let Ok(w) = LossWeights::new(lam[0], lam[1], last) else { return Ok(()) };
        let mut tape = Tape::new();
        let [a, b, c] = l.map(|x| tape.leaf(Tensor::scalar(x)));
        let (total, report) = total_loss(&mut tape, a, b, c, w).unwrap();
        let expect = w.lambda1() * l[0] + w.lambda2() * l[1] + w.lambda3() * l[2];
        prop_assert!((tape.value(total).item().unwrap() - expect).abs() < 1e-12);
        prop_assert!((report.total - expect).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn recall_is_monotone_in_k_and_threshold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let interval = |rng: &mut ChaCha8Rng| -> Interval {
            let s = rng.random_range(0.0..20.0);
            (s, s + rng.random_range(0.1..10.0))
        };
        let gts: Vec<Interval> = (0..n).map(|_| interval(&mut rng)).collect();
        let preds: Vec<Vec<Interval>> = (0..n)
            .map(|_| (0..rng.random_range(1..8)).map(|_| interval(&mut rng)).collect())
            .collect();
        for t in [0.1, 0.3, 0.5, 0.7] {
            for k in 1..8 {
                let r = recall_at_k(&preds, &gts, k, t).unwrap();
                prop_assert!(r <= recall_at_k(&preds, &gts, k + 1, t).unwrap());
                prop_assert!(r >= recall_at_k(&preds, &gts, k, t + 0.1).unwrap());
            }
        }
    }
}

#[test]
fn hinge_is_zero_exactly_when_the_margin_holds() {
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    for delta in [0.1, 0.5] {
        let cfg = TripletConfig::new(delta, 10).unwrap();
        for &sp in &grid {
            for &sn in &grid {
                let mut tape = Tape::new();
                // Constant rows give SC = value on the full span and 0 elsewhere.
                let pos = tape.leaf(Tensor::filled(&[1, 1], sp));
                let neg = tape.leaf(Tensor::filled(&[1, 1], sn));
                let pos = MapVar::all_active(&tape, pos).unwrap();
                let neg = MapVar::all_active(&tape, neg).unwrap();
                let l = matching_loss(&mut tape, &pos, &neg, &cfg, ScorerOptions::default()).unwrap();
                let l = tape.value(l).item().unwrap();
                assert!(l >= 0.0);
                assert_eq!(l == 0.0, sp >= sn + delta, "S+={sp} S-={sn} delta={delta}");
                assert!((l - hinge(delta, sp, sn)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn synthetic_moments_are_separable_by_cosine() {
    let cfg = SyntheticConfig { n_videos: 100, ..SyntheticConfig::default() };
    let (data, truth) = generate_synthetic(&cfg).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let (mut good, mut total) = (0, 0);
    for (v, rec) in data.records.iter().enumerate() {
        let frames = data.frames(&rec.video_id).unwrap();
        let ids = &truth.query_ids[v];
        let mut q = vec![0.0; cfg.feature_dim];
        for &id in ids {
            q.iter_mut().zip(truth.token_directions.row(id)).for_each(|(a, b)| *a += b);
        }
        let (s, e) = truth.spans[v];
        let scores: Vec<f64> = (0..cfg.n_clips).map(|j| cos(&q, frames.row(j))).collect();
        let worst_in = (s..=e).map(|j| scores[j]).fold(f64::INFINITY, f64::min);
        for j in (0..cfg.n_clips).filter(|j| !(s..=e).contains(j)) {
            total += 1;
            good += usize::from(scores[j] < worst_in);
        }
    }
    assert!(good as f64 >= 0.99 * total as f64, "{good}/{total}");
}
