//! Classification statistics, the random-guessing confidence band and a
//! paired signed-rank test.
//!
//! Undefined per-class terms in macro averages (no support or no predictions)
//! count as 0 and still enter the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts with rows = true class and columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

pub fn confusion(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels against {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![0; n_classes * n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) outside {n_classes} classes"
            )));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

impl ConfusionMatrix {
    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} counts for {n_classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(k, p)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (0..self.n_classes).map(|k| self.get(k, k)).sum::<u64>() as f64 / n as f64
    }

    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.get(k, k), self.col_sum(k))
    }

    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.get(k, k), self.row_sum(k))
    }

    pub fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_precision(&self) -> f64 {
        self.class_mean(|k| self.precision(k))
    }

    pub fn macro_recall(&self) -> f64 {
        self.class_mean(|k| self.recall(k))
    }

    pub fn macro_f1(&self) -> f64 {
        self.class_mean(|k| self.f1(k))
    }

    fn class_mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.n_classes).map(f).sum::<f64>() / self.n_classes as f64
    }

    /// Cohen's kappa; an error when chance agreement is 1.
    pub fn cohen_kappa(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::InvalidArgument("kappa of an empty matrix".into()));
        }
        let n = n as f64;
        let po = self.accuracy();
        let pe: f64 = (0..self.n_classes)
            .map(|k| (self.row_sum(k) as f64 / n) * (self.col_sum(k) as f64 / n))
            .sum();
        if (1.0 - pe).abs() < 1e-15 {
            return Err(Error::Numeric("kappa undefined: chance agreement is 1".into()));
        }
        Ok((po - pe) / (1.0 - pe))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Row-wise argmax of an `N x C` score matrix (first maximum wins).
pub fn argmax_rows<T: Copy + Into<f64>>(scores: &[T], n_classes: usize) -> Vec<usize> {
    scores
        .chunks(n_classes)
        .map(|row| {
            row.iter()
                .map(|&v| v.into())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Binary ROC AUC from ranks, ties counted one half. `None` without both
/// positives and negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `truth`.
pub fn auc_ovr(truth: &[usize], scores: &[f64], n_classes: usize) -> Result<f64> {
    if scores.len() != truth.len() * n_classes {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} samples x {n_classes} classes",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite class score".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for k in 0..n_classes {
        let col: Vec<f64> = scores.chunks(n_classes).map(|r| r[k]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        match binary_auc(&col, &pos) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => log::warn!("class {k} skipped in one-vs-rest AUC: absent from truth or universal"),
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no class has both positives and negatives".into()));
    }
    Ok(sum / used as f64)
}

/// Normal-approximation band `p ± z sqrt(p (1 - p) / n)` for guessing accuracy.
pub fn chance_interval(p: f64, n: usize, z: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) || n == 0 {
        return Err(Error::InvalidArgument(format!("chance interval for p={p}, n={n}")));
    }
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    Ok((p - half, p + half))
}

/// Standard normal upper tail.
fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest `n` evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 15;

/// Two-sided signed-rank test on paired differences.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite difference".into()));
    }
    let d: Vec<f64> = differences.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::InvalidArgument("all differences are zero".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // Ranks are multiples of 1/2; count sign assignments by doubled rank sum.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut ways = vec![0u64; max + 1];
        ways[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                ways[s] += ways[s - r];
            }
        }
        let total = (1u64 << n) as f64;
        let w2 = (2.0 * w).round() as usize;
        let le: u64 = ways[..=w2].iter().sum();
        let ge: u64 = ways[w2..].iter().sum();
        let p = (2.0 * le.min(ge) as f64 / total).min(1.0);
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: p,
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w - mean) / var.sqrt();
    Ok(WilcoxonResult {
        statistic: w,
        p_value: (2.0 * normal_sf(z.abs())).min(1.0),
        n,
        exact: false,
    })
}

/// Summary of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `None` when undefined (single-class agreement).
    pub kappa: Option<f64>,
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
    pub n: usize,
    pub n_classes: usize,
}

impl MetricsReport {
    /// Predictions are the row-wise argmax of `scores` (`N x C`).
    pub fn from_scores(truth: &[usize], scores: &[f64], n_classes: usize) -> Result<Self> {
        if scores.len() != truth.len() * n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} samples x {n_classes} classes",
                scores.len(),
                truth.len()
            )));
        }
        let predicted = argmax_rows(scores, n_classes);
        let m = confusion(truth, &predicted, n_classes)?;
        Ok(MetricsReport {
            accuracy: m.accuracy(),
            macro_precision: m.macro_precision(),
            macro_recall: m.macro_recall(),
            macro_f1: m.macro_f1(),
            kappa: m.cohen_kappa().ok(),
            auc: auc_ovr(truth, scores, n_classes).ok(),
            n: truth.len(),
            n_classes,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_basics() {
        let m = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(m.get(t, p), u64::from(t == p));
            }
        }
        let m = confusion(&[1], &[2], 3).unwrap();
        assert_eq!(m.get(1, 2), 1);
        assert_eq!(m.total(), 1);
        assert!(confusion(&[0, 3], &[0, 1], 3).is_err());
        assert!(confusion(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let p: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let m = confusion(&t, &p, 5).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let n = t.iter().zip(&p).filter(|(&x, &y)| x == a && y == b).count() as u64;
                assert_eq!(m.get(a, b), n);
            }
        }
    }

    #[test]
    fn macro_f1_cases() {
        let perfect = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(perfect.macro_f1(), 1.0);
        // Class 2 never predicted.
        let m = confusion(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.f1(2), 0.0);
        let m = ConfusionMatrix::from_counts(3, vec![2, 1, 0, 0, 3, 1, 1, 0, 2]).unwrap();
        let want = (2.0 / 3.0 + 0.75 + 2.0 / 3.0) / 3.0;
        assert!((m.macro_f1() - want).abs() < 1e-12);
    }

    #[test]
    fn kappa_cases() {
        let m = ConfusionMatrix::from_counts(2, vec![30, 10, 20, 40]).unwrap();
        // p_o = 0.7, p_e = 0.4 * 0.5 + 0.6 * 0.5 = 0.5.
        assert!((m.cohen_kappa().unwrap() - 0.4).abs() < 1e-12);
        let m = ConfusionMatrix::from_counts(2, vec![25, 0, 0, 25]).unwrap();
        assert_eq!(m.cohen_kappa().unwrap(), 1.0);
        // Predictions independent of truth.
        let m = ConfusionMatrix::from_counts(2, vec![10, 10, 10, 10]).unwrap();
        assert!(m.cohen_kappa().unwrap().abs() < 1e-12);
        let m = ConfusionMatrix::from_counts(2, vec![7, 0, 0, 0]).unwrap();
        assert!(m.cohen_kappa().is_err());
    }

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    n += 1.0;
                    s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        s / n
    }

    #[test]
    fn auc_cases() {
        let truth = [0, 1, 2, 1, 0];
        let onehot: Vec<f64> = truth
            .iter()
            .flat_map(|&t| (0..3).map(move |k| if k == t { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(auc_ovr(&truth, &onehot, 3).unwrap(), 1.0);
        assert_eq!(auc_ovr(&truth, &[0.3; 15], 3).unwrap(), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..60).map(|_| rng.gen_range(0..5) as f64).collect();
        let mut want = 0.0;
        for k in 0..3 {
            let col: Vec<f64> = scores.chunks(3).map(|r| r[k]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            want += pairwise_auc(&col, &pos);
        }
        assert!((auc_ovr(&truth, &scores, 3).unwrap() - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_skips_absent_class() {
        let truth = [0, 0, 1, 1];
        let scores = [0.9, 0.1, 0.0, 0.8, 0.2, 0.0, 0.3, 0.7, 0.0, 0.1, 0.9, 0.0];
        assert_eq!(auc_ovr(&truth, &scores, 3).unwrap(), 1.0);
        assert!(auc_ovr(&[0, 0], &[1.0, 0.0, 1.0, 0.0], 2).is_err());
        assert!(auc_ovr(&[0, 1], &[f64::NAN, 0.0, 1.0, 0.0], 2).is_err());
    }

    #[test]
    fn chance_interval_values() {
        let (lo, hi) = chance_interval(0.2, 5700, 1.96).unwrap();
        assert_eq!(((lo * 1e4).round(), (hi * 1e4).round()), (1896.0, 2104.0));
        let (lo, hi) = chance_interval(0.2, 100, 1.96).unwrap();
        assert!((lo - 0.1216).abs() < 1e-12 && (hi - 0.2784).abs() < 1e-12);
        let (lo, hi) = chance_interval(0.5, 100_000_000, 1.96).unwrap();
        assert!(hi - lo < 1e-3);
        assert!(chance_interval(1.0, 10, 1.96).is_err());
        assert!(chance_interval(0.2, 0, 1.96).is_err());
    }

    /// W+ distribution by walking every sign assignment.
    fn enumerate_p(d: &[f64]) -> (f64, f64) {
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs);
        let w = |mask: u32| -> f64 { (0..d.len()).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum() };
        let observed: f64 = (0..d.len()).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
        let total = 1u32 << d.len();
        let (mut le, mut ge) = (0u32, 0u32);
        for m in 0..total {
            let v = w(m);
            if v <= observed + 1e-9 {
                le += 1;
            }
            if v >= observed - 1e-9 {
                ge += 1;
            }
        }
        (observed, (2.0 * le.min(ge) as f64 / total as f64).min(1.0))
    }

    #[test]
    fn wilcoxon_cases() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
        let r = wilcoxon_signed_rank(&[1.0, -1.0, 2.5, -2.5, 4.0, -4.0]).unwrap();
        assert_eq!(r.statistic, 6.0 * 7.0 / 4.0);
        assert_eq!(r.p_value, 1.0);
        assert!(wilcoxon_signed_rank(&[0.0, 0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d: Vec<f64> = (0..10).map(|_| rng.gen_range(-3..4) as f64).collect();
        let r = wilcoxon_signed_rank(&d).unwrap();
        let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let (w, p) = enumerate_p(&nz);
        assert_eq!(r.statistic, w);
        assert!((r.p_value - p).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_normal_approximation_is_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.5)).collect();
        let approx = wilcoxon_signed_rank(&d).unwrap();
        assert!(!approx.exact);
        let (_, exact) = enumerate_p(&d);
        assert!((approx.p_value - exact).abs() < 0.03, "{} vs {exact}", approx.p_value);
    }

    #[test]
    fn report_from_scores() {
        let truth = [0, 1, 2, 2];
        let scores = [0.9, 0.1, 0.0, 0.2, 0.7, 0.1, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1];
        let r = MetricsReport::from_scores(&truth, &scores, 3).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.n, 4);
        assert!(r.kappa.is_some() && r.auc.is_some());
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn metrics_ignore_sample_order(
            pairs in prop::collection::vec((0usize..4, 0usize..4, 0.0f64..1.0), 8..40),
            seed in any::<u64>(),
        ) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let scores: Vec<f64> = pairs.iter().flat_map(|p| (0..4).map(move |k| p.2 * (k as f64 + 1.0) % 1.0)).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let t2: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let p2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let s2: Vec<f64> = idx.iter().flat_map(|&i| scores[i * 4..i * 4 + 4].to_vec()).collect();
            let (a, b) = (confusion(&truth, &pred, 4).unwrap(), confusion(&t2, &p2, 4).unwrap());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.accuracy(), a.counts().iter().step_by(5).sum::<u64>() as f64 / pairs.len() as f64);
            let (x, y) = (auc_ovr(&truth, &scores, 4), auc_ovr(&t2, &s2, 4));
            if let (Ok(x), Ok(y)) = (x, y) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariant_to_monotone_transform(
            truth in prop::collection::vec(0usize..3, 6..30),
            raw in prop::collection::vec(-3.0f64..3.0, 90),
        ) {
            let scores = &raw[..truth.len() * 3];
            let warped: Vec<f64> = scores.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
            if let Ok(a) = auc_ovr(&truth, scores, 3) {
                prop_assert!((a - auc_ovr(&truth, &warped, 3).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn kappa_one_iff_diagonal(counts in prop::collection::vec(0u64..5, 9)) {
            let m = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
            let diagonal = (0..3).all(|t| (0..3).all(|p| t == p || m.get(t, p) == 0));
            let classes = (0..3).filter(|&k| m.get(k, k) > 0).count();
            if let Ok(k) = m.cohen_kappa() {
                prop_assert_eq!((k - 1.0).abs() < 1e-12, diagonal && classes >= 2);
            }
        }

        #[test]
        fn chance_interval_symmetry(p in 0.01f64..0.99, n in 1usize..100_000) {
            let (lo, hi) = chance_interval(p, n, 1.96).unwrap();
            prop_assert!(((p - lo) - (hi - p)).abs() < 1e-12);
            let (lo4, hi4) = chance_interval(p, 4 * n, 1.96).unwrap();
            prop_assert!(((hi - lo) / (hi4 - lo4) - 2.0).abs() < 1e-9);
        }
    }
}
