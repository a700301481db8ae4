use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};

pub const DEFAULT_BINS: usize = 50;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(DdadError::Eval(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(DdadError::Eval(format!("label {l} not in {{0, 1}}")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(DdadError::Eval(format!("score {s} is not comparable")));
    }
    Ok(())
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney rank-sum statistic.
///
/// Label 1 marks abnormal images; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DdadError::Eval("AUC needs both normal and abnormal samples".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DdadError::Eval(format!(
            "spearman needs two equal-length series of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DdadError::Eval("spearman undefined for a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Per-class counts over `n_bins` equal bins of the jointly min-max
/// normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// raw score range mapped to `[0, 1]`
    pub min: f64,
    pub max: f64,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.normal.len()
    }

    /// Bin edges in normalized units.
    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let n = self.n_bins() as f64;
        (bin as f64 / n, (bin + 1) as f64 / n)
    }

    /// Sum over bins of the smaller of the two class frequencies.
    pub fn overlap_coefficient(&self) -> f64 {
        let tn: usize = self.normal.iter().sum();
        let ta: usize = self.abnormal.iter().sum();
        if tn == 0 || ta == 0 {
            return 0.0;
        }
        self.normal.iter().zip(&self.abnormal).map(|(&n, &a)| (n as f64 / tn as f64).min(a as f64 / ta as f64)).sum()
    }

    /// `bin_lo,bin_hi,count_normal,count_abnormal` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count_normal,count_abnormal\n");
        for b in 0..self.n_bins() {
            let (lo, hi) = self.edges(b);
            out.push_str(&format!("{lo},{hi},{},{}\n", self.normal[b], self.abnormal[b]));
        }
        out
    }
}

/// Bins are right-exclusive except the last; if all scores are equal,
/// everything lands in bin 0.
pub fn histogram(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<Histogram> {
    check_inputs(scores, labels)?;
    if n_bins == 0 {
        return Err(DdadError::Eval("histogram needs at least one bin".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut h = Histogram { min, max, normal: vec![0; n_bins], abnormal: vec![0; n_bins] };
    let span = max - min;
    for (&s, &l) in scores.iter().zip(labels) {
        let bin = if span > 0.0 { (((s - min) / span * n_bins as f64) as usize).min(n_bins - 1) } else { 0 };
        if l == 1 {
            h.abnormal[bin] += 1;
        } else {
            h.normal[bin] += 1;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.0, 1.0, 2.0, 3.0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(DdadError::Eval(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn histogram_rules() {
        let h = histogram(&[0.0, 0.5, 1.0], &[0, 0, 1], 2).unwrap();
        assert_eq!((h.normal.clone(), h.abnormal.clone()), (vec![1, 1], vec![0, 1]));
        let c = histogram(&[2.0; 4], &[0, 1, 0, 1], 10).unwrap();
        assert_eq!((c.normal[0], c.abnormal[0]), (2, 2));
        let one = histogram(&[0.3, 0.1, 0.9], &[0, 1, 1], 1).unwrap();
        assert_eq!((one.normal[0], one.abnormal[0]), (1, 2));
        assert_eq!(c.overlap_coefficient(), 1.0);
        let sep = histogram(&[0.0, 0.1, 0.9, 1.0], &[0, 0, 1, 1], 4).unwrap();
        assert_eq!(sep.overlap_coefficient(), 0.0);
    }

    #[test]
    fn spearman_monotone() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&a, &[1.0; 4]).is_err());
    }
}
