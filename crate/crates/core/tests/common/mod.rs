//! Brute-force oracles shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bvap::metrics::FixationSet;
use bvap::Tensor;

/// P(pos > neg) + ½·P(pos = neg) over every (fixated, non-fixated) pixel pair.
pub fn mann_whitney(map: &Tensor, fix: &FixationSet) -> f64 {
    let w = map.width();
    let fixated: BTreeSet<usize> = fix.points.iter().map(|&(x, y)| y * w + x).collect();
    let d = map.data();
    let (mut score, mut pairs) = (0.0, 0.0);
    for &p in &fixated {
        for n in (0..d.len()).filter(|n| !fixated.contains(n)) {
            score += if d[p] > d[n] {
                1.0
            } else if d[p] == d[n] {
                0.5
            } else {
                0.0
            };
            pairs += 1.0;
        }
    }
    score / pairs
}

/// Cheapest integer transport plan between two 2×2 mass grids of equal
/// total, found by enumerating every plan; distances are divided by the
/// grid diagonal and the cost by the total mass.
pub fn emd_2x2_enumerated(a: [u32; 4], b: [u32; 4]) -> f64 {
    let total: u32 = a.iter().sum();
    assert_eq!(total, b.iter().sum::<u32>());
    let pos = |i: usize| ((i / 2) as f64, (i % 2) as f64);
    let dist = |i: usize, j: usize| {
        let (p, q) = (pos(i), pos(j));
        ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
    };
    fn rows(i: usize, a: &[u32; 4], cap: &mut [u32; 4], cost: f64, dist: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if i == 4 {
            if cap.iter().all(|&c| c == 0) {
                *best = best.min(cost);
            }
            return;
        }
        #[allow(clippy::too_many_arguments)]
        fn split(
            i: usize,
            j: usize,
            left: u32,
            a: &[u32; 4],
            cap: &mut [u32; 4],
            cost: f64,
            dist: &dyn Fn(usize, usize) -> f64,
            best: &mut f64,
        ) {
            if j == 3 {
                if left <= cap[3] {
                    cap[3] -= left;
                    rows(i + 1, a, cap, cost + left as f64 * dist(i, 3), dist, best);
                    cap[3] += left;
                }
                return;
            }
            for f in 0..=left.min(cap[j]) {
                cap[j] -= f;
                split(i, j + 1, left - f, a, cap, cost + f as f64 * dist(i, j), dist, best);
                cap[j] += f;
            }
        }
        split(i, 0, a[i], a, cap, cost, dist, best);
    }
    let mut cap = b;
    let mut best = f64::INFINITY;
    rows(0, &a, &mut cap, 0.0, &dist, &mut best);
    best / (total as f64 * 2f64.sqrt())
}

/// Pearson correlation from raw power sums.
pub fn cc_direct(m: &Tensor, z: &Tensor) -> f64 {
    let n = m.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in m.data().iter().zip(z.data()) {
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

/// Standardized map averaged over the binary fixation map.
pub fn nss_direct(m: &Tensor, fix: &FixationSet) -> f64 {
    let w = m.width();
    let n = m.len() as f64;
    let mean = m.data().iter().sum::<f64>() / n;
    let std = (m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut binary = vec![0.0; m.len()];
    for &(x, y) in &fix.points {
        binary[y * w + x] = 1.0;
    }
    let count: f64 = binary.iter().sum();
    m.data().iter().zip(&binary).map(|(v, b)| b * (v - mean) / std).sum::<f64>() / count
}
