use lfod_core::features::{
    decode_feature_set, encode_feature_set, read_feature_file, write_feature_file,
    zscore_normalize, FeatureRecord, FeatureSet, LayerLayout, SetLabel,
};
use lfod_core::metrics::{auroc, fpr_at_tpr, ScoredSet};
use proptest::prelude::*;

fn pair_auroc(ids: &[f64], oods: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in oods {
        for &i in ids {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (ids.len() * oods.len()) as f64
}

// Best FPR over every candidate threshold, flagging OOD when score > lambda.
fn sweep_fpr(ids: &[f64], oods: &[f64], target: f64) -> f64 {
    let mut cands: Vec<f64> = ids.iter().chain(oods).copied().collect();
    cands.push(f64::NEG_INFINITY);
    let mut best = 1.0f64;
    for &l in &cands {
        let tp = oods.iter().filter(|&&s| s > l).count() as f64 / oods.len() as f64;
        if tp + 1e-12 >= target {
            let fp = ids.iter().filter(|&&s| s > l).count() as f64 / ids.len() as f64;
            best = best.min(fp);
        }
    }
    best
}

fn score_groups() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let val = prop_oneof![(-5i32..5).prop_map(f64::from), -10.0f64..10.0];
    (
        prop::collection::vec(val.clone(), 1..40),
        prop::collection::vec(val, 1..40),
    )
}

proptest! {
    #[test]
    fn auroc_matches_pair_count((ids, oods) in score_groups()) {
        let set = ScoredSet::from_groups(&ids, &oods).unwrap();
        prop_assert!((auroc(&set) - pair_auroc(&ids, &oods)).abs() < 1e-12);
    }

    #[test]
    fn fpr_matches_threshold_sweep((ids, oods) in score_groups(), target in prop_oneof![Just(0.95), Just(0.5), Just(1.0), (1u32..=100).prop_map(|k| f64::from(k) / 100.0)]) {
        let set = ScoredSet::from_groups(&ids, &oods).unwrap();
        prop_assert_eq!(fpr_at_tpr(&set, target).unwrap(), sweep_fpr(&ids, &oods, target));
    }

    #[test]
    fn auroc_rank_invariant((ids, oods) in score_groups()) {
        let f = |v: &f64| v.mul_add(3.0, 1.0).exp().ln_1p();
        let a = ScoredSet::from_groups(&ids, &oods).unwrap();
        let ti: Vec<f64> = ids.iter().map(f).collect();
        let to: Vec<f64> = oods.iter().map(f).collect();
        // strictly monotone but rounding can merge neighbours, so only compare untied inputs
        let distinct = |v: &[f64], w: &[f64]| {
            let mut all: Vec<f64> = v.iter().chain(w).copied().collect();
            all.sort_by(f64::total_cmp);
            all.windows(2).filter(|p| p[0] == p[1]).count()
        };
        prop_assume!(distinct(&ids, &oods) == distinct(&ti, &to));
        let b = ScoredSet::from_groups(&ti, &to).unwrap();
        prop_assert!((auroc(&a) - auroc(&b)).abs() < 1e-12);
    }

    #[test]
    fn swapping_roles_and_sign_keeps_auroc((ids, oods) in score_groups()) {
        let a = ScoredSet::from_groups(&ids, &oods).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let b = ScoredSet::from_groups(&neg(&oods), &neg(&ids)).unwrap();
        prop_assert!((auroc(&a) - auroc(&b)).abs() < 1e-12);
        prop_assert!((auroc(&a) + auroc(&a.negated()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_moments(v in prop::collection::vec(-100.0f64..100.0, 2..64)) {
        let z = zscore_normalize(&v, 1e-5).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let raw_mean = v.iter().sum::<f64>() / n;
        let raw_var = v.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        // var(z) = raw_var / (raw_var + delta)
        prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn zscore_shift_scale(v in prop::collection::vec(-10.0f64..10.0, 2..32), a in -50.0f64..50.0, s in 0.5f64..20.0) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assume!(var > 1e-2);
        let z = zscore_normalize(&v, 1e-5).unwrap();
        let w: Vec<f64> = v.iter().map(|x| a + s * x).collect();
        let zw = zscore_normalize(&w, 1e-5).unwrap();
        // the two differ only through delta / var terms
        let bound = 1e-5 / var.min(s * s * var) * z.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1e-9;
        for (p, q) in z.iter().zip(&zw) {
            prop_assert!((p - q).abs() <= bound, "{p} vs {q}, bound {bound}");
        }
    }

    #[test]
    fn feature_set_round_trip(
        counts in prop::collection::vec(1usize..6, 1..4),
        n in 1usize..8,
        seed in any::<u32>(),
        label in prop_oneof![Just(SetLabel::Id), Just(SetLabel::Ood), Just(SetLabel::Unlabeled)],
    ) {
        let layout = LayerLayout::new(counts.clone(), "prop").unwrap();
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            f32::from_bits((x >> 9) | 0x3f80_0000) - 1.5
        };
        let records: Vec<FeatureRecord> = (0..n)
            .map(|i| FeatureRecord::new(format!("s{i}"), counts.iter().map(|&c| (0..c).map(|_| next()).collect()).collect()))
            .collect();
        let set = FeatureSet::new(layout, records, label).unwrap();
        let bytes = encode_feature_set(&set).unwrap();
        let back = decode_feature_set(&bytes, "prop").unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(encode_feature_set(&back).unwrap(), bytes);
    }
}

#[test]
fn feature_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let layout = LayerLayout::new(vec![3, 2], "disk").unwrap();
    let records = vec![
        FeatureRecord::new(
            "a",
            vec![vec![1.0, -0.0, f32::MIN_POSITIVE], vec![3.5, 1e-30]],
        ),
        FeatureRecord::new("b", vec![vec![0.1, 0.2, 0.3], vec![f32::MAX, -f32::MAX]]),
    ];
    let set = FeatureSet::new(layout, records, SetLabel::Ood).unwrap();
    let path = dir.path().join("x.lfod");
    write_feature_file(&set, &path).unwrap();
    let back = read_feature_file(&path).unwrap();
    assert_eq!(back.layout().encoder_tag(), "disk");
    for (a, b) in back.records().iter().zip(set.records()) {
        for (la, lb) in a.raw_layers.iter().zip(&b.raw_layers) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(la), bits(lb));
        }
    }
}
