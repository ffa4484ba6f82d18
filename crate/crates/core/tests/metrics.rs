use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sconv_core::metrics::ConfusionMatrix;
use sconv_core::LabelMap;

/// Counts `(gt, pred)` pairs pixel by pixel and derives the scores from the raw counts.
fn brute_force(pairs: &[(u8, u8)], classes: usize) -> (f64, f64, f64, Vec<Option<f64>>, HashMap<(u8, u8), u64>) {
    let mut counts: HashMap<(u8, u8), u64> = HashMap::new();
    for &(g, p) in pairs {
        if g != 255 {
            *counts.entry((g, p)).or_default() += 1;
        }
    }
    let count = |g: usize, p: usize| counts.get(&(g as u8, p as u8)).copied().unwrap_or(0);
    let total: u64 = counts.values().sum();
    let correct: u64 = (0..classes).map(|i| count(i, i)).sum();
    let (mut accs, mut ious) = (Vec::new(), Vec::new());
    let mut per = Vec::new();
    for i in 0..classes {
        let gi: u64 = (0..classes).map(|j| count(i, j)).sum();
        let pi: u64 = (0..classes).map(|j| count(j, i)).sum();
        if gi > 0 {
            accs.push(count(i, i) as f64 / gi as f64);
        }
        if gi == 0 && pi == 0 {
            per.push(None);
        } else {
            let iou = count(i, i) as f64 / (gi + pi - count(i, i)) as f64;
            ious.push(iou);
            per.push(Some(iou));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (correct as f64 / total as f64, mean(&accs), mean(&ious), per, counts)
}

#[test]
fn matches_per_pixel_counting_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..150 {
        let classes = rng.gen_range(2..=6);
        let (h, w) = (8, 8);
        let images = rng.gen_range(1..=3);
        let mut cm = ConfusionMatrix::new(classes);
        let mut pairs = Vec::new();
        for _ in 0..images {
            let gt: Vec<u8> = (0..h * w)
                .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..classes as u8) })
                .collect();
            let pred: Vec<u8> = gt
                .iter()
                .map(|&g| if g != 255 && rng.gen_bool(0.6) { g } else { rng.gen_range(0..classes as u8) })
                .collect();
            pairs.extend(gt.iter().copied().zip(pred.iter().copied()));
            cm.accumulate(&LabelMap::new(h, w, pred).unwrap(), &LabelMap::new(h, w, gt).unwrap(), 255)
                .unwrap();
        }
        let (acc, macc, miou, per, counts) = brute_force(&pairs, classes);
        for i in 0..classes {
            for j in 0..classes {
                assert_eq!(cm.get(i, j), counts.get(&(i as u8, j as u8)).copied().unwrap_or(0));
            }
        }
        let m = cm.compute().unwrap();
        assert_eq!((m.acc, m.macc, m.miou), (acc, macc, miou), "case {case}");
        assert_eq!(m.per_class_iou, per);
        for v in [m.acc, m.macc, m.miou] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gt = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
    let mut cm = ConfusionMatrix::new(5);
    cm.accumulate(&gt, &gt, 255).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert!(i == j || cm.get(i, j) == 0);
        }
    }
    let m = cm.compute().unwrap();
    assert_eq!((m.acc, m.macc, m.miou), (1.0, 1.0, 1.0));
}

#[test]
fn all_ignore_leaves_matrix_unchanged() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&LabelMap::filled(3, 3, 1), &LabelMap::filled(3, 3, 255), 255).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(3));
}

proptest! {
    #[test]
    fn relabeling_permutes_iou_and_keeps_means(seed in any::<u64>(), classes in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u8> = (0..64).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..classes as u8)).collect();
        let mut perm: Vec<u8> = (0..classes as u8).collect();
        for i in (1..classes).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(classes);
        a.accumulate(&LabelMap::new(8, 8, pred.clone()).unwrap(), &LabelMap::new(8, 8, gt.clone()).unwrap(), 255).unwrap();
        let mut b = ConfusionMatrix::new(classes);
        b.accumulate(&LabelMap::new(8, 8, relabel(&pred)).unwrap(), &LabelMap::new(8, 8, relabel(&gt)).unwrap(), 255).unwrap();
        let (ma, mb) = (a.compute().unwrap(), b.compute().unwrap());
        for c in 0..classes {
            prop_assert_eq!(ma.per_class_iou[c], mb.per_class_iou[perm[c] as usize]);
        }
        prop_assert_eq!(ma.acc, mb.acc);
        prop_assert!((ma.macc - mb.macc).abs() <= 1e-12);
        prop_assert!((ma.miou - mb.miou).abs() <= 1e-12);
    }

    #[test]
    fn merge_equals_joint_accumulation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<(LabelMap, LabelMap)> = (0..4)
            .map(|_| {
                let g = (0..16).map(|_| rng.gen_range(0..3u8)).collect();
                let p = (0..16).map(|_| rng.gen_range(0..3u8)).collect();
                (LabelMap::new(4, 4, p).unwrap(), LabelMap::new(4, 4, g).unwrap())
            })
            .collect();
        let mut joint = ConfusionMatrix::new(3);
        let (mut x, mut y) = (ConfusionMatrix::new(3), ConfusionMatrix::new(3));
        for (i, (p, g)) in maps.iter().enumerate() {
            joint.accumulate(p, g, 255).unwrap();
            if i % 2 == 0 { x.accumulate(p, g, 255).unwrap() } else { y.accumulate(p, g, 255).unwrap() }
        }
        y.merge(&x).unwrap();
        prop_assert_eq!(joint, y);
    }
}
