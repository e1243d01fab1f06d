//! Saliency evaluation: CC, NSS, three AUC variants, EMD, and groundtruth
//! density maps.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{BorderMode, GaussianBlur};
use crate::tensor::Tensor;

/// Fixated pixels of one image, as `(x, y)` in map coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixationSet {
    pub image_id: String,
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(image_id: impl Into<String>, points: Vec<(usize, usize)>) -> Self {
        FixationSet { image_id: image_id.into(), points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        match self.points.iter().find(|&&(x, y)| x >= w || y >= h) {
            Some(p) => Err(Error::Invalid(format!("{}: fixation {p:?} outside {w}x{h} map", self.image_id))),
            None => Ok(()),
        }
    }

    /// Distinct fixated pixels as flat indices, ascending.
    pub fn unique_indices(&self, w: usize) -> Vec<usize> {
        self.points.iter().map(|&(x, y)| y * w + x).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

fn single_map<'a>(m: &'a Tensor, what: &str) -> Result<(usize, usize, &'a [f64])> {
    let [b, c, h, w] = m.dims();
    if b != 1 || c != 1 {
        return Err(Error::shape("metric", format!("{what} must be a single [1,1,H,W] map, got {:?}", m.dims())));
    }
    Ok((h, w, m.data()))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.iter().all(|&x| x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation between a prediction and a density map.
pub fn cc(m: &Tensor, z: &Tensor) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    let (hz, wz, b) = single_map(z, "density")?;
    if (h, w) != (hz, wz) {
        return Err(Error::shape("cc", format!("{h}x{w} vs {hz}x{wz}")));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Undefined("cc of a constant map"));
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Mean standardized saliency over the distinct fixated pixels.
pub fn nss(m: &Tensor, fix: &FixationSet) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    if fix.is_empty() {
        return Err(Error::Invalid(format!("{}: no fixations", fix.image_id)));
    }
    fix.check_bounds(h, w)?;
    let (mean, std) = mean_std(a);
    if std == 0.0 {
        return Err(Error::Undefined("nss of a constant map"));
    }
    let idx = fix.unique_indices(w);
    Ok(idx.iter().map(|&i| (a[i] - mean) / std).sum::<f64>() / idx.len() as f64)
}

/// Area under the ROC curve for scores of positives against negatives,
/// with ties credited one half.
pub fn roc_area(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Undefined("AUC needs positives and negatives"));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    // For every negative, count positives strictly above and tied.
    let mut wins = 0.0f64;
    let mut ties = 0.0f64;
    let mut lo = 0;
    let mut hi = 0;
    for &v in &neg {
        while lo < pos.len() && pos[lo] < v {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < pos.len() && pos[hi] <= v {
            hi += 1;
        }
        wins += (pos.len() - hi) as f64;
        ties += (hi - lo) as f64;
    }
    Ok((wins + 0.5 * ties) / (pos.len() as f64 * neg.len() as f64))
}

/// AUC-Judd: fixated pixels against every other pixel, thresholding at every
/// distinct map value.
pub fn auc_judd(m: &Tensor, fix: &FixationSet) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    if fix.is_empty() {
        return Err(Error::Invalid(format!("{}: no fixations", fix.image_id)));
    }
    fix.check_bounds(h, w)?;
    let idx = fix.unique_indices(w);
    let mut is_pos = vec![false; a.len()];
    for &i in &idx {
        is_pos[i] = true;
    }
    let pos: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let neg: Vec<f64> = a.iter().zip(&is_pos).filter(|(_, &p)| !p).map(|(&v, _)| v).collect();
    roc_area(&pos, &neg)
}

/// AUC-Borji: negatives are uniformly drawn pixels, `splits` draws of
/// `|positives|` each; returns the mean area.
pub fn auc_borji(m: &Tensor, fix: &FixationSet, splits: usize, seed: u64) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    if fix.is_empty() {
        return Err(Error::Invalid(format!("{}: no fixations", fix.image_id)));
    }
    fix.check_bounds(h, w)?;
    let pos: Vec<f64> = fix.unique_indices(w).iter().map(|&i| a[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_mean(splits, |neg| {
        neg.clear();
        neg.extend((0..pos.len()).map(|_| a[rng.random_range(0..a.len())]));
        roc_area(&pos, neg)
    })
}

/// Shuffled AUC: negatives are drawn from `others`, fixations of other
/// images in the same map space.
pub fn auc_shuffled(m: &Tensor, fix: &FixationSet, others: &[(usize, usize)], splits: usize, seed: u64) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    if fix.is_empty() {
        return Err(Error::Invalid(format!("{}: no fixations", fix.image_id)));
    }
    if others.is_empty() {
        return Err(Error::Invalid("shuffled AUC needs other-image fixations".into()));
    }
    fix.check_bounds(h, w)?;
    FixationSet::new("negatives", others.to_vec()).check_bounds(h, w)?;
    let pos: Vec<f64> = fix.unique_indices(w).iter().map(|&i| a[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_mean(splits, |neg| {
        neg.clear();
        neg.extend((0..pos.len()).map(|_| {
            let (x, y) = others[rng.random_range(0..others.len())];
            a[y * w + x]
        }));
        roc_area(&pos, neg)
    })
}

fn split_mean(splits: usize, mut one: impl FnMut(&mut Vec<f64>) -> Result<f64>) -> Result<f64> {
    if splits == 0 {
        return Err(Error::Invalid("AUC needs at least one split".into()));
    }
    let mut buf = Vec::new();
    let mut total = 0.0;
    for _ in 0..splits {
        total += one(&mut buf)?;
    }
    Ok(total / splits as f64)
}

/// Block-sum downsampling to `gh x gw`; every pixel lands in exactly one cell.
pub fn downsample_mass(h: usize, w: usize, data: &[f64], gh: usize, gw: usize) -> Vec<f64> {
    let mut out = vec![0.0; gh * gw];
    for y in 0..h {
        let cy = y * gh / h;
        for x in 0..w {
            out[cy * gw + x * gw / w] += data[y * w + x];
        }
    }
    out
}

/// Earth mover's distance between two maps after block-sum downsampling to
/// at most `grid x grid` cells and normalization to unit mass. Ground
/// distances are Euclidean in cell units divided by the grid diagonal.
pub fn emd(m: &Tensor, z: &Tensor, grid: usize) -> Result<f64> {
    let (h, w, a) = single_map(m, "prediction")?;
    let (hz, wz, b) = single_map(z, "density")?;
    if (h, w) != (hz, wz) {
        return Err(Error::shape("emd", format!("{h}x{w} vs {hz}x{wz}")));
    }
    if grid == 0 || grid > 32 {
        return Err(Error::Invalid(format!("emd grid must be in 1..=32, got {grid}")));
    }
    if a.iter().chain(b).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid("emd needs finite nonnegative maps".into()));
    }
    let (gh, gw) = (grid.min(h), grid.min(w));
    let da = downsample_mass(h, w, a, gh, gw);
    let db = downsample_mass(h, w, b, gh, gw);
    emd_grid(gh, gw, &da, &db)
}

/// Exact transport cost between two mass grids of equal shape.
pub fn emd_grid(gh: usize, gw: usize, a: &[f64], b: &[f64]) -> Result<f64> {
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if sa <= 0.0 || sb <= 0.0 {
        return Err(Error::Undefined("emd of a zero-mass map"));
    }
    let diag = (((gh - 1) * (gh - 1) + (gw - 1) * (gw - 1)) as f64).sqrt();
    if diag == 0.0 {
        return Ok(0.0);
    }
    // Mass shared by a cell stays put at zero cost; only the excess moves.
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for i in 0..gh * gw {
        let d = a[i] / sa - b[i] / sb;
        if d > 0.0 {
            supply.push((i, d));
        } else if d < 0.0 {
            demand.push((i, -d));
        }
    }
    let cost = |p: usize, q: usize| {
        let (dy, dx) = ((p / gw) as f64 - (q / gw) as f64, (p % gw) as f64 - (q % gw) as f64);
        (dy * dy + dx * dx).sqrt()
    };
    let total = transport(&supply, &demand, cost);
    Ok(total / diag)
}

/// Minimum-cost transport by successive shortest paths on the dense
/// bipartite residual graph.
fn transport(supply: &[(usize, f64)], demand: &[(usize, f64)], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let (ns, nd) = (supply.len(), demand.len());
    if ns == 0 || nd == 0 {
        return 0.0;
    }
    let c: Vec<f64> =
        supply.iter().flat_map(|&(p, _)| demand.iter().map(move |&(q, _)| (p, q))).map(|(p, q)| cost(p, q)).collect();
    let mut flow = vec![0.0f64; ns * nd];
    let mut sup: Vec<f64> = supply.iter().map(|s| s.1).collect();
    let mut dem: Vec<f64> = demand.iter().map(|d| d.1).collect();
    let scale = sup.iter().sum::<f64>().max(dem.iter().sum::<f64>());
    let tol = 1e-14 * scale;
    // Potentials: sources 0..ns, sinks ns..ns+nd.
    let mut pi = vec![0.0f64; ns + nd];
    let n = ns + nd;
    let mut dist = vec![0.0f64; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    loop {
        if sup.iter().all(|&s| s <= tol) || dem.iter().all(|&d| d <= tol) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..ns {
            if sup[i] > tol {
                dist[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= ns && dem[u - ns] > tol {
                target = u;
                break;
            }
            if u < ns {
                let row = &c[u * nd..(u + 1) * nd];
                for j in 0..nd {
                    let v = ns + j;
                    if done[v] {
                        continue;
                    }
                    let nd_ = best + row[j] + pi[u] - pi[v];
                    if nd_ < dist[v] {
                        dist[v] = nd_;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - ns;
                for i in 0..ns {
                    if done[i] || flow[i * nd + j] <= 0.0 {
                        continue;
                    }
                    let nd_ = best - c[i * nd + j] + pi[u] - pi[i];
                    if nd_ < dist[i] {
                        dist[i] = nd_;
                        prev[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }
        let dt = dist[target];
        for v in 0..n {
            if done[v] {
                pi[v] += dist[v] - dt;
            }
        }
        // Bottleneck along the path.
        let mut amount = dem[target - ns];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= ns {
                amount = amount.min(flow[v * nd + (u - ns)]);
            }
            v = u;
        }
        let source = v;
        amount = amount.min(sup[source]);
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < ns {
                flow[u * nd + (v - ns)] += amount;
            } else {
                let f = &mut flow[v * nd + (u - ns)];
                *f = if *f - amount <= tol { 0.0 } else { *f - amount };
            }
            v = u;
        }
        sup[source] = if sup[source] - amount <= tol { 0.0 } else { sup[source] - amount };
        let d = &mut dem[target - ns];
        *d = if *d - amount <= tol { 0.0 } else { *d - amount };
    }
    flow.iter().zip(&c).map(|(f, c)| f * c).sum()
}

/// Groundtruth density: unit impulses at the distinct fixated pixels,
/// blurred with a zero-padded Gaussian and normalized to sum 1.
pub fn density_from_fixations(fix: &FixationSet, h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if fix.is_empty() {
        return Err(Error::Invalid(format!("{}: no fixations", fix.image_id)));
    }
    fix.check_bounds(h, w)?;
    let mut plane = vec![0.0; h * w];
    for i in fix.unique_indices(w) {
        plane[i] = 1.0;
    }
    if sigma > 0.0 {
        plane = GaussianBlur::new(sigma, BorderMode::Zero)?.forward_plane(h, w, &plane);
    }
    let total: f64 = plane.iter().sum();
    plane.iter_mut().for_each(|v| *v /= total);
    Tensor::new([1, 1, h, w], plane)
}

/// Density blur width for a `size`-pixel map: 8 px at 224, scaled linearly.
pub fn default_density_sigma(size: usize) -> f64 {
    8.0 * size as f64 / 224.0
}

/// Settings shared by every per-image evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricOptions {
    pub splits: usize,
    pub seed: u64,
    pub emd_grid: usize,
    /// EMD is the slowest metric; it can be skipped.
    pub with_emd: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { splits: 100, seed: 0, emd_grid: 32, with_emd: true }
    }
}

/// One row of the corpus report. Metrics that are undefined for an image
/// (e.g. CC of a constant map) are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub auc_judd: Option<f64>,
    pub auc_borji: Option<f64>,
    pub s_auc: Option<f64>,
    pub emd: Option<f64>,
}

pub const REPORT_HEADER: [&str; 7] = ["image_id", "cc", "nss", "auc_judd", "auc_borji", "s_auc", "emd"];

impl MetricRow {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.cc, self.nss, self.auc_judd, self.auc_borji, self.s_auc, self.emd]
    }

    pub fn to_csv_fields(&self) -> Vec<String> {
        let mut out = vec![self.image_id.clone()];
        out.extend(self.values().iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        out
    }
}

/// Scores one prediction against its fixations and density map. `others`
/// supplies the shuffled-AUC negatives.
pub fn evaluate(
    pred: &Tensor,
    density: &Tensor,
    fix: &FixationSet,
    others: &[(usize, usize)],
    opts: &MetricOptions,
) -> MetricRow {
    let seed = opts.seed ^ fnv1a(&fix.image_id);
    MetricRow {
        image_id: fix.image_id.clone(),
        cc: cc(pred, density).ok(),
        nss: nss(pred, fix).ok(),
        auc_judd: auc_judd(pred, fix).ok(),
        auc_borji: auc_borji(pred, fix, opts.splits, seed).ok(),
        s_auc: auc_shuffled(pred, fix, others, opts.splits, seed).ok(),
        emd: if opts.with_emd { emd(pred, density, opts.emd_grid).ok() } else { None },
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Column means over the rows where each metric is defined.
pub fn aggregate(rows: &[MetricRow]) -> MetricRow {
    let mut sums = [0.0f64; 6];
    let mut counts = [0usize; 6];
    for r in rows {
        for (k, v) in r.values().iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    MetricRow {
        image_id: "mean".into(),
        cc: mean(0),
        nss: mean(1),
        auc_judd: mean(2),
        auc_borji: mean(3),
        s_auc: mean(4),
        emd: mean(5),
    }
}

/// Other images' fixations, for shuffled-AUC negatives of image `k`.
pub fn pooled_others(sets: &[FixationSet], k: usize) -> Vec<(usize, usize)> {
    sets.iter().enumerate().filter(|&(i, _)| i != k).flat_map(|(_, s)| s.points.iter().copied()).collect()
}

/// Draws a uniform random point; exposed for tests and the synthetic
/// generator's negative sets.
pub fn random_point<R: Rng>(rng: &mut R, h: usize, w: usize) -> (usize, usize) {
    (rng.random_range(0..w), rng.random_range(0..h))
}
