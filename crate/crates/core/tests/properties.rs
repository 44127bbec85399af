use paddyspec::dataset::{class_weights, stratified_kfold, Label, Manifest, SampleRecord};
use paddyspec::registration::{filter_matches, DropSide, Homography, Match};
use paddyspec::spectral::{ndvi_value, NDVI_EPS};
use paddyspec::training::ConfusionMatrix;
use proptest::prelude::*;

fn manifest(labels: &[usize]) -> Manifest {
    Manifest {
        records: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| SampleRecord {
                id: format!("s{i:04}"),
                rgb_path: Default::default(),
                rgnir_path: Default::default(),
                label: Label::from_index(l).unwrap(),
                session_id: "default".into(),
                geotag: None,
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn kfold_partitions_and_balances(
        counts in prop::array::uniform3(5usize..40),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, counts[c])).collect();
        let m = manifest(&labels);
        let f = stratified_kfold(&m, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for fold in 0..k {
            for i in f.indices(fold) {
                seen[i] += 1;
            }
            prop_assert_eq!(f.indices(fold).len() + f.complement(fold).len(), labels.len());
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for c in 0..3 {
            let per: Vec<usize> = (0..k).map(|fold| m.subset(&f.indices(fold)).counts()[c]).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{:?}", per);
        }
        let sizes: Vec<usize> = (0..k).map(|fold| f.indices(fold).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{:?}", sizes);
        prop_assert_eq!(stratified_kfold(&m, k, seed).unwrap(), f);
    }

    #[test]
    fn class_weights_balance_the_classes(counts in prop::array::uniform3(1usize..500)) {
        let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, counts[c])).collect();
        let w = class_weights(&manifest(&labels)).unwrap();
        let n: usize = counts.iter().sum();
        // every class carries the same total weight, N / K
        for c in 0..3 {
            prop_assert!((w[c] * counts[c] as f64 - n as f64 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ndvi_is_bounded_and_antisymmetric(red in 0.0f64..1.0, nir in 0.0f64..1.0) {
        let v = ndvi_value(red, nir, NDVI_EPS);
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert!((v + ndvi_value(nir, red, NDVI_EPS)).abs() < 1e-15);
        prop_assert_eq!(v > 0.0, nir > red);
    }

    #[test]
    fn homography_inverse_round_trips(
        a in -0.3f64..0.3, s in 0.3f64..3.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        p in -1e-3f64..1e-3, q in -1e-3f64..1e-3, x in 0.0f64..100.0, y in 0.0f64..100.0,
    ) {
        let h = Homography::from_rows([
            [s * a.cos(), -s * a.sin(), tx],
            [s * a.sin(), s * a.cos(), ty],
            [p, q, 1.0],
        ]).unwrap();
        let inv = h.inverse().unwrap();
        if let Some((u, v)) = h.apply(x, y) {
            let (bx, by) = inv.apply(u, v).unwrap();
            prop_assert!((bx - x).abs() < 1e-7 && (by - y).abs() < 1e-7);
        }
        prop_assert!(inv.after(&h).unwrap().corner_error(&Homography::identity(), 100, 100) < 1e-7);
    }

    #[test]
    fn filtering_removes_the_ceiling_fraction(
        dists in prop::collection::vec(0u32..256, 1..300),
        frac in 0.0f64..0.99,
        best in any::<bool>(),
    ) {
        let m: Vec<Match> = dists.iter().enumerate().map(|(i, &d)| Match { index_a: i, index_b: 0, distance: d }).collect();
        let side = if best { DropSide::Best } else { DropSide::Worst };
        let kept = filter_matches(&m, frac, side).unwrap();
        let dropped = (m.len() as f64 * frac).ceil() as usize;
        prop_assert_eq!(kept.len(), m.len() - dropped);
        prop_assert!(kept.windows(2).all(|w| w[0].distance <= w[1].distance));
        let mut sorted = dists.clone();
        sorted.sort();
        let expect: Vec<u32> = if best { sorted[dropped..].to_vec() } else { sorted[..m.len() - dropped].to_vec() };
        prop_assert_eq!(kept.iter().map(|k| k.distance).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn confusion_totals_and_bounds(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (l, p): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let m = ConfusionMatrix::from_pairs(&l, &p).unwrap();
        prop_assert_eq!(m.total() as usize, pairs.len());
        for f in m.per_class_f1() {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        if l == p {
            prop_assert!((m.accuracy() - 1.0).abs() < 1e-15);
        }
    }
}
