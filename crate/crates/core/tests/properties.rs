use boundnet_core::detector::{pairwise_similarity, DiffBlockOutput};
use boundnet_core::evalproto::match_boundaries;
use boundnet_core::scheduler::{build_exit_mask, compact, estimate_peaks, run_with_scorer, ExitPolicy};
use boundnet_core::seqfeat::{run_stage, unfold_windows, window_source};
use boundnet_core::{FrameFeatureSequence, Model, ModelConfig, MultiScaleFeature, ScoreSequence, Tensor};
use proptest::prelude::*;

fn brute_peaks(p: &[f64], eps: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for t in 0..p.len() {
        if t == 0 || t + 1 == p.len() {
            continue;
        }
        if p[t] > eps && p[t] > p[t - 1] && p[t] > p[t + 1] {
            out.push(t);
        }
    }
    out
}

/// Maximum matching by exhaustive search over ground-truth subsets.
fn brute_tp(dets: &[f64], gts: &[f64], th: f64, dur: f64) -> usize {
    fn go(i: usize, used: u32, dets: &[f64], gts: &[f64], th: f64, dur: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, used, dets, gts, th, dur);
        for (j, &g) in gts.iter().enumerate() {
            if used & (1 << j) == 0 && (dets[i] - g).abs() / dur <= th {
                best = best.max(1 + go(i + 1, used | (1 << j), dets, gts, th, dur));
            }
        }
        best
    }
    go(0, 0, dets, gts, th, dur)
}

fn sorted_times(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..100, 0..=max_len).prop_map(|mut v| {
        v.sort_unstable();
        v.dedup();
        v.into_iter().map(|x| (x as f64 + 0.5) / 10.0).collect()
    })
}

fn feature_seq(t: usize, c: usize, vals: &[f64]) -> FrameFeatureSequence {
    FrameFeatureSequence::from_raw(Tensor::from_vec(&[t, c], vals[..t * c].to_vec()).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn peaks_equal_brute_force(p in prop::collection::vec(0.0f64..1.0, 0..40), eps in 0.0f64..1.0) {
        prop_assert_eq!(estimate_peaks(&p, eps), brute_peaks(&p, eps));
    }

    #[test]
    fn quantized_peaks_equal_brute_force(p in prop::collection::vec(0u8..4, 0..30)) {
        // many ties: plateaus never produce a peak
        let p: Vec<f64> = p.into_iter().map(|v| v as f64 / 4.0).collect();
        prop_assert_eq!(estimate_peaks(&p, 0.1), brute_peaks(&p, 0.1));
    }

    #[test]
    fn mask_is_union_of_intervals(
        t_len in 1usize..60,
        raw in prop::collection::vec(0usize..60, 0..6),
        radius in 0usize..10,
    ) {
        let b: Vec<usize> = raw.into_iter().filter(|&x| x < t_len).collect();
        let m = build_exit_mask(&b, radius, t_len, 1);
        prop_assert_eq!(m.keep.len(), t_len);
        for t in 0..t_len {
            let near = b.iter().any(|&x| x.abs_diff(t) <= radius);
            prop_assert_eq!(m.keep[t], !near);
        }
    }

    #[test]
    fn wider_radius_exits_superset(
        t_len in 1usize..60,
        raw in prop::collection::vec(0usize..60, 0..6),
        r in 0usize..8,
        extra in 0usize..4,
    ) {
        let b: Vec<usize> = raw.into_iter().filter(|&x| x < t_len).collect();
        let narrow = build_exit_mask(&b, r, t_len, 1);
        let wide = build_exit_mask(&b, r + extra, t_len, 1);
        for t in 0..t_len {
            prop_assert!(!narrow.keep[t] <= !wide.keep[t]);
        }
    }

    #[test]
    fn matching_equals_exhaustive(
        dets in sorted_times(6),
        gts in sorted_times(6),
        th_i in 1usize..=10,
    ) {
        let th = th_i as f64 / 20.0;
        let m = match_boundaries(&dets, &gts, th, 10.0).unwrap();
        prop_assert_eq!(m.tp, brute_tp(&dets, &gts, th, 10.0));
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        for &(i, j) in &m.matched_pairs {
            prop_assert!((dets[i] - gts[j]).abs() / 10.0 <= th);
        }
    }

    #[test]
    fn matching_is_symmetric_and_monotone(dets in sorted_times(8), gts in sorted_times(8)) {
        let mut prev_tp = 0;
        let mut prev_f1 = 0.0;
        for i in 1..=10 {
            let th = i as f64 / 20.0;
            let a = match_boundaries(&dets, &gts, th, 10.0).unwrap();
            let b = match_boundaries(&gts, &dets, th, 10.0).unwrap();
            prop_assert_eq!(a.tp, b.tp);
            prop_assert!(a.tp >= prev_tp);
            prop_assert!(a.f1() >= prev_f1);
            prev_tp = a.tp;
            prev_f1 = a.f1();
        }
    }

    #[test]
    fn similarity_is_symmetric_cosine(
        w in 2usize..7,
        c in 1usize..5,
        vals in prop::collection::vec(-2.0f64..2.0, 6 * 4 * 2),
        zero_row in prop::option::of(0usize..6),
    ) {
        let mut data = vals[..2 * w * c].to_vec();
        if let Some(z) = zero_row.filter(|&z| z < w) {
            data[z * c..(z + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_vec(&[1, 2, w, c], data.clone()).unwrap();
        let s = pairwise_similarity(&DiffBlockOutput { data: x, n_blocks: 1 });
        for map in 0..2 {
            for i in 0..w {
                for j in 0..w {
                    let v = s.get(0, map, i, j);
                    prop_assert_eq!(v, s.get(0, map, j, i));
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
                    let row = |r: usize| &data[(map * w + r) * c..(map * w + r + 1) * c];
                    let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                    let n = |r: usize| row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                    let want = if n(i) < 1e-12 || n(j) < 1e-12 { 0.0 } else { dot / (n(i) * n(j)) };
                    prop_assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn windows_replicate_edges(
        t_len in 1usize..20,
        k in 1usize..5,
        vals in prop::collection::vec(-1.0f64..1.0, 20 * 2 * 3),
    ) {
        let (l, c) = (2, 3);
        let r = MultiScaleFeature::from_tensor(
            Tensor::from_vec(&[t_len, l, c], vals[..t_len * l * c].to_vec()).unwrap(),
        ).unwrap();
        let win = unfold_windows(&r, k).unwrap();
        let w = 2 * k + 1;
        prop_assert_eq!(win.data().shape(), &[t_len, l, w, c]);
        for t in 0..t_len {
            for s in 0..l {
                for o in 0..w {
                    let src = window_source(t, o, k, t_len);
                    let want = (t as isize + o as isize - k as isize).clamp(0, t_len as isize - 1) as usize;
                    prop_assert_eq!(src, want);
                    for ch in 0..c {
                        let got = win.data().data()[((t * l + s) * w + o) * c + ch];
                        prop_assert_eq!(got, r.data().data()[(src * l + s) * c + ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn stages_commute_with_compaction(
        t_len in 1usize..16,
        vals in prop::collection::vec(-1.0f64..1.0, 16 * 4),
        exits in prop::collection::vec(0usize..16, 0..4),
        radius in 0usize..3,
        seed in 0u64..4,
    ) {
        let model = Model::new(ModelConfig::miniature(), seed).unwrap();
        let x = feature_seq(t_len, 4, &vals);
        let b: Vec<usize> = exits.into_iter().filter(|&e| e < t_len).collect();
        let mask = build_exit_mask(&b, radius, t_len, 1);
        let mut a = compact(&x, &mask).unwrap();
        let mut z = x.clone();
        for stage in &model.stages {
            a = run_stage(&a, stage).unwrap();
            z = run_stage(&z, stage).unwrap();
            let zc = compact(&z, &mask).unwrap();
            prop_assert_eq!(a.origin(), zc.origin());
            for (p, q) in a.data().data().iter().zip(zc.data().data()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// With only the first detector able to fire, a wider exit radius never
    /// costs more.
    #[test]
    fn compute_non_increasing_in_radius(
        t_len in 3usize..30,
        scores in prop::collection::vec(0.01f64..0.99, 30),
        vals in prop::collection::vec(-1.0f64..1.0, 30 * 4),
    ) {
        let model = Model::new(ModelConfig::miniature(), 0).unwrap();
        let x = feature_seq(t_len, 4, &vals);
        let first = scores[..t_len].to_vec();
        let mut prev = u64::MAX;
        for radius in 0..6 {
            let policy = ExitPolicy::from_model(&model).with_radius(radius);
            let out = run_with_scorer(&x, &model, &policy, &mut |l, w| {
                let n = w.data().dim(0);
                let v = if l == 1 { first.clone() } else { vec![0.1; n] };
                ScoreSequence::new(v, l)
            }).unwrap();
            let total = out.ledger.total();
            prop_assert!(total <= prev, "radius {radius}: {total} > {prev}");
            prev = total;
        }
    }
}

/// A deeper detector's peak swallowed by a wider first-stage interval is no
/// longer recorded, so its own interval disappears: total exits can shrink
/// as the radius grows once more than one detector fires.
#[test]
fn deeper_exits_are_not_monotone_in_radius() {
    let model = Model::new(ModelConfig::miniature(), 0).unwrap();
    let t_len = 30;
    let x = feature_seq(t_len, 4, &vec![0.25; t_len * 4]);
    let peak_at = |b: usize| {
        let mut v = vec![0.1; t_len];
        v[b] = 0.9;
        v
    };
    let exited_after_two = |radius: usize| {
        let policy = ExitPolicy::from_model(&model).with_radius(radius);
        let out = run_with_scorer(&x, &model, &policy, &mut |l, _| {
            let v = match l {
                1 => peak_at(10),
                2 => peak_at(13),
                _ => vec![0.1; t_len],
            };
            ScoreSequence::new(v, l)
        })
        .unwrap();
        out.state.exit_stage.iter().filter(|&&s| s <= 2).count()
    };
    assert_eq!(exited_after_two(2), 8);
    assert_eq!(exited_after_two(3), 7);
}
