//! Segmentation and image-quality metrics: confusion matrix / mIoU, the
//! inception score over any classifier's probabilities, and the Fréchet
//! distance between Gaussian fits of feature activations.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// K×K counts, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        assert!(k > 0);
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one image: pixels whose truth label is the ignore index
    /// (−1) are skipped, anything else must lie in {0..K−1}.
    pub fn accumulate(&mut self, truth: &[i32], pred: &[i32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Metric(format!(
                "confusion: {} truth labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t < 0 {
                continue;
            }
            if t as usize >= self.k || p < 0 || p as usize >= self.k {
                return Err(Error::Metric(format!(
                    "confusion: label out of range (truth {t}, pred {p}, {} classes)",
                    self.k
                )));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge per-shard matrices; addition is the only combine operation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }
}

/// Per-class IoU (None where truth and prediction are both empty) and the
/// mean.
#[derive(Debug, Clone)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `IoU_k = TP/(TP+FP+FN)`. Classes with zero union are excluded from the
/// mean by default; with `include_zero_union` they count as 0 instead
/// (fixed-class-list averaging).
pub fn miou(cm: &ConfusionMatrix, include_zero_union: bool) -> Result<MiouResult> {
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..k {
        let tp = cm.count(c, c);
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.count(t, c)).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            if include_zero_union {
                per_class.push(Some(0.0));
                n += 1;
            } else {
                per_class.push(None);
            }
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("miou: every class has zero union".into()));
    }
    Ok(MiouResult {
        per_class,
        mean: sum / n as f64,
    })
}

/// `exp(mean_n KL(p(·|x_n) ‖ p̄))` over an N×K row-stochastic matrix.
/// Classifier-agnostic; rows must sum to 1 within 1e-4.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Metric("inception_score: no rows".into()));
    }
    let k = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Metric(format!("inception_score: ragged row {i}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Metric(format!(
                "inception_score: row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    let n = probs.len() as f64;
    let mut marginal = vec![0.0f64; k];
    for row in probs {
        for (m, &p) in marginal.iter_mut().zip(row) {
            *m += p / n;
        }
    }
    let mut mean_kl = 0.0;
    for row in probs {
        let mut kl = 0.0;
        for (&p, &q) in row.iter().zip(&marginal) {
            if p > 0.0 {
                kl += p * (p / q.max(1e-300)).ln();
            }
        }
        mean_kl += kl / n;
    }
    Ok(mean_kl.exp())
}

fn mean_and_cov(feats: &[Vec<f64>], d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = feats.len();
    let mut mu = DMatrix::zeros(d, 1);
    for row in feats {
        for (i, &v) in row.iter().enumerate() {
            mu[(i, 0)] += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for row in feats {
            for i in 0..d {
                let di = row[i] - mu[(i, 0)];
                for j in 0..d {
                    cov[(i, j)] += di * (row[j] - mu[(j, 0)]);
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut diag = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        diag[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * diag * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows =
/// samples): `‖μ_A−μ_B‖² + Tr(Σ_A+Σ_B−2(Σ_A^{1/2}Σ_BΣ_A^{1/2})^{1/2})`.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.is_empty() || feats_b.is_empty() {
        return Err(Error::Metric("frechet_distance: empty feature set".into()));
    }
    let d = feats_a[0].len();
    if feats_b[0].len() != d {
        return Err(Error::Metric(format!(
            "frechet_distance: dimension mismatch {d} vs {}",
            feats_b[0].len()
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(feats_a, d);
    let (mu_b, cov_b) = mean_and_cov(feats_b, d);
    if cov_a.iter().any(|v| !v.is_finite()) || cov_b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("frechet_distance: non-finite covariance".into()));
    }
    let sqrt_a = sym_sqrt(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let sqrt_inner = sym_sqrt(&inner);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let trace_term = (cov_a + cov_b - sqrt_inner * 2.0).trace();
    let dist = mean_term + trace_term;
    if !dist.is_finite() {
        return Err(Error::Metric("frechet_distance: non-finite result".into()));
    }
    // Numerical noise can push an exact-zero distance slightly negative.
    Ok(dist.max(0.0))
}

/// One cell of the 2×2 adaptation ablation.
#[derive(Debug, Clone, Copy)]
pub struct AblationCell {
    pub spade_on: bool,
    pub sce_on: bool,
    pub miou: f64,
    pub gain_vs_lower: f64,
    pub gap_to_upper: f64,
}

impl AblationCell {
    pub fn new(spade_on: bool, sce_on: bool, miou: f64, lower: f64, upper: f64) -> Self {
        AblationCell {
            spade_on,
            sce_on,
            miou,
            gain_vs_lower: miou - lower,
            gap_to_upper: upper - miou,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn confusion_hand_examples() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);

        let mut diag = ConfusionMatrix::new(3);
        diag.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(diag.count(t, p), u64::from(t == p));
            }
        }

        let mut ig = ConfusionMatrix::new(2);
        ig.accumulate(&[-1, -1], &[0, 1]).unwrap();
        assert_eq!(ig.total(), 0);
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[2], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[5]).is_err());
    }

    #[test]
    fn confusion_is_order_independent() {
        let mut r = rng::stream(1, "cmord");
        let images: Vec<(Vec<i32>, Vec<i32>)> = (0..6)
            .map(|_| {
                let t: Vec<i32> = (0..16).map(|_| r.random_range(-1..4)).collect();
                let p: Vec<i32> = (0..16).map(|_| r.random_range(0..4)).collect();
                (t, p)
            })
            .collect();
        let mut fwd = ConfusionMatrix::new(4);
        for (t, p) in &images {
            fwd.accumulate(t, p).unwrap();
        }
        let mut rev = ConfusionMatrix::new(4);
        for (t, p) in images.iter().rev() {
            rev.accumulate(t, p).unwrap();
        }
        assert_eq!(fwd, rev);

        // Sharded accumulation merges to the same matrix.
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        for (i, (t, p)) in images.iter().enumerate() {
            if i % 2 == 0 { &mut a } else { &mut b }.accumulate(t, p).unwrap();
        }
        a.merge(&b);
        assert_eq!(a, fwd);
    }

    #[test]
    fn miou_hand_examples() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let r = miou(&cm, false).unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-12);

        let mut perfect = ConfusionMatrix::new(3);
        perfect.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let r = miou(&perfect, false).unwrap();
        assert_eq!(r.mean, 1.0);

        // Class 2 absent from truth and prediction: excluded by default,
        // counted as zero under the fixed-list policy.
        let mut partial = ConfusionMatrix::new(3);
        partial.accumulate(&[0, 1], &[0, 1]).unwrap();
        let excl = miou(&partial, false).unwrap();
        assert_eq!(excl.mean, 1.0);
        assert!(excl.per_class[2].is_none());
        let incl = miou(&partial, true).unwrap();
        assert!((incl.mean - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_empty_matrix_is_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(miou(&cm, false).is_err());
    }

    #[test]
    fn miou_matches_brute_force_oracle() {
        let mut r = rng::stream(2, "miouref");
        for trial in 0..50 {
            let k = 4usize;
            let truth: Vec<i32> = (0..64)
                .map(|_| if r.random_range(0.0..1.0) < 0.1 { -1 } else { r.random_range(0..k as i32) })
                .collect();
            let pred: Vec<i32> = (0..64).map(|_| r.random_range(0..k as i32)).collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&truth, &pred).unwrap();
            let got = miou(&cm, false).unwrap();

            // Brute force per-pixel set intersection/union per class.
            let mut sum = 0.0;
            let mut n = 0;
            for c in 0..k as i32 {
                let inter = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&t, &p)| t == c && p == c)
                    .count();
                let union = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&t, &p)| t == c || (p == c && t >= 0))
                    .count();
                if union > 0 {
                    sum += inter as f64 / union as f64;
                    n += 1;
                }
            }
            let expect = sum / n as f64;
            assert!(
                (got.mean - expect).abs() < 1e-12,
                "trial {trial}: {} vs {expect}",
                got.mean
            );
        }
    }

    #[test]
    fn inception_score_examples() {
        let uniform = vec![vec![0.25; 4]; 8];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-9);

        let k = 5usize;
        let one_hot: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| f64::from(i == j)).collect())
            .collect();
        assert!((inception_score(&one_hot).unwrap() - k as f64).abs() < 1e-9);

        // Permutation invariance.
        let mut r = rng::stream(3, "isperm");
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let mut row: Vec<f64> = (0..4).map(|_| r.random_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let a = inception_score(&rows).unwrap();
        let b = inception_score(&shuffled).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((1.0..=4.0).contains(&a), "IS must lie in [1, K]");
    }

    #[test]
    fn inception_score_rejects_unnormalized() {
        let bad = vec![vec![0.7, 0.7]];
        assert!(inception_score(&bad).is_err());
    }

    #[test]
    fn frechet_examples() {
        let mut r = rng::stream(4, "fidex");
        let a: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let d_same = frechet_distance(&a, &a).unwrap();
        assert!(d_same.abs() < 1e-6, "identical sets: {d_same}");

        // Closed-form 1-D Gaussian case: standardize a sample so the sample
        // mean is exactly 0 and the unbiased sample variance exactly 1,
        // then shift by 1: distance = (μ gap)² = 1.
        let raw: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
        let mean: f64 = raw.iter().sum::<f64>() / raw.len() as f64;
        let var: f64 =
            raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (raw.len() - 1) as f64;
        let z: Vec<Vec<f64>> = raw.iter().map(|v| vec![(v - mean) / var.sqrt()]).collect();
        let shifted: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0] + 1.0]).collect();
        let d = frechet_distance(&z, &shifted).unwrap();
        assert!((d - 1.0).abs() < 1e-3, "1-D Gaussian case: {d}");

        let ab = frechet_distance(&a, &z_pad(&z, 3)).unwrap();
        let ba = frechet_distance(&z_pad(&z, 3), &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "symmetry: {ab} vs {ba}");
    }

    fn z_pad(rows: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mut v = r.clone();
                v.resize(d, 0.5);
                v
            })
            .collect()
    }

    #[test]
    fn frechet_grows_with_noise() {
        let mut r = rng::stream(5, "fidmono");
        let base: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let mut medians = Vec::new();
        for sigma in [0.0, 0.1, 0.5, 1.0] {
            let mut ds = Vec::new();
            for seed in 0..5 {
                let mut rr = rng::stream(600 + seed, "fidmono");
                let noisy: Vec<Vec<f64>> = base
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|&v| v + rng::normal::<f64>(&mut rr, 0.0, sigma))
                            .collect()
                    })
                    .collect();
                ds.push(frechet_distance(&base, &noisy).unwrap());
            }
            ds.sort_by(f64::total_cmp);
            medians.push(ds[2]);
        }
        for w in medians.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "distance must not shrink with noise: {medians:?}");
        }
    }

    #[test]
    fn ablation_cell_bookkeeping() {
        let (lower, upper) = (30.0, 60.0);
        let cell = AblationCell::new(true, true, 45.0, lower, upper);
        assert_eq!(cell.gain_vs_lower + cell.gap_to_upper, upper - lower);
    }
}
