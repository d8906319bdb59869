//! Metrics checked against direct pixel counting over 2-D boolean grids.

use rand::Rng;
use ucmnet::metrics::{confusion, metrics_report, THRESHOLD};
use ucmnet::seed::rng_for;
use ucmnet::ConfusionCounts;

/// `SUITE` lists every check for reuse by the acceptance report; under
/// `cfg(test)` each also runs as its own test.
macro_rules! suite {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const SUITE: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod cases {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}

const SIDE: usize = 8;

struct Oracle {
    miou: f64,
    mdice: f64,
    miou_star: f64,
    mdice_star: f64,
}

/// Counts by walking rows and columns; no shared code with the metrics module.
fn oracle(pairs: &[([[bool; SIDE]; SIDE], [[bool; SIDE]; SIDE])]) -> Oracle {
    let (mut iou_sum, mut dice_sum) = (0.0, 0.0);
    let (mut all_tp, mut all_fp, mut all_fn) = (0u64, 0u64, 0u64);
    for (pred, target) in pairs {
        let (mut inter, mut union, mut p_area, mut t_area) = (0u64, 0u64, 0u64, 0u64);
        for row in 0..SIDE {
            for col in 0..SIDE {
                let (p, t) = (pred[row][col], target[row][col]);
                inter += (p && t) as u64;
                union += (p || t) as u64;
                p_area += p as u64;
                t_area += t as u64;
            }
        }
        iou_sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        dice_sum += (2.0 * inter as f64 + 1.0) / ((p_area + t_area) as f64 + 1.0);
        all_tp += inter;
        all_fp += p_area - inter;
        all_fn += t_area - inter;
    }
    let n = pairs.len() as f64;
    Oracle {
        miou: iou_sum / n,
        mdice: dice_sum / n,
        miou_star: all_tp as f64 / (all_tp + all_fp + all_fn) as f64,
        mdice_star: (2 * all_tp) as f64 / (2 * all_tp + all_fp + all_fn) as f64,
    }
}

pub fn matches_pixel_counting_on_random_masks() {
    let mut rng = rng_for(2024, "metric-oracle", 0);
    let mut grids = Vec::new();
    let mut counts = Vec::new();
    for _ in 0..100 {
        // soft predictions, some exactly at the threshold
        let probs: Vec<f64> = (0..SIDE * SIDE)
            .map(|_| if rng.gen_bool(0.1) { THRESHOLD } else { rng.gen_range(0.0..1.0) })
            .collect();
        let density = rng.gen_range(0.0..1.0);
        let target: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.gen_bool(density) as u8 as f64).collect();
        let mut pg = [[false; SIDE]; SIDE];
        let mut tg = [[false; SIDE]; SIDE];
        for i in 0..SIDE * SIDE {
            pg[i / SIDE][i % SIDE] = probs[i] >= 0.5;
            tg[i / SIDE][i % SIDE] = target[i] == 1.0;
        }
        grids.push((pg, tg));
        counts.push(confusion(&probs, &target, THRESHOLD).unwrap());
    }
    let r = metrics_report(&counts).unwrap();
    let o = oracle(&grids);
    assert_eq!(r.miou, o.miou);
    assert_eq!(r.mdice, o.mdice);
    assert_eq!(r.miou_star, o.miou_star);
    assert_eq!(r.mdice_star, o.mdice_star);
}

pub fn worked_example() {
    let a = ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 };
    let b = ConfusionCounts { tp: 3, fp: 0, fn_: 1, tn: 0 };
    let r = metrics_report(&[a, b]).unwrap();
    assert_eq!(r.miou, 0.625);
    assert_eq!(r.miou_star, 0.625);
    assert_eq!(r.mdice_star, 10.0 / 13.0);
}

pub fn perfect_and_disjoint_predictions() {
    let y = [1.0f64, 0.0, 1.0, 1.0];
    let perfect = confusion(&y, &y, THRESHOLD).unwrap();
    let r = metrics_report(&[perfect, perfect]).unwrap();
    assert_eq!((r.miou, r.mdice, r.miou_star, r.mdice_star), (1.0, 1.0, 1.0, 1.0));
    let disjoint = confusion(&[0.0f64, 1.0, 0.0, 0.0], &y, THRESHOLD).unwrap();
    assert_eq!(disjoint.iou(), 0.0);
}

suite!(matches_pixel_counting_on_random_masks, worked_example, perfect_and_disjoint_predictions);
