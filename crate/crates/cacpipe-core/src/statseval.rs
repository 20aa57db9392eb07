//! Agreement statistics between reference and predicted scores: intraclass
//! correlation, linearly weighted kappa, Bland-Altman limits, confusion
//! matrices, and accuracy.
//!
//! The ICC variant is the single-measure, absolute-agreement, two-way form
//! ICC(A,1): one automatic score is compared against one reference score per
//! volume, and a constant bias must count against agreement.

use alloc::vec;
use alloc::vec::Vec;

use crate::agatston::RiskScheme;
use crate::error::{CoreError, Result};
use crate::real::f64math;

/// Square confusion matrix over 1-based category ids; rows index the
/// reference category, columns the predicted one.
#[derive(Clone, Debug)]
pub struct Confusion {
    /// Number of categories.
    pub k: usize,
    /// Row-major counts, rows = reference.
    pub counts: Vec<f64>,
}

impl Confusion {
    /// Empty K x K matrix.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0.0; k * k],
        }
    }

    /// Records one (reference, predicted) pair of 1-based category ids.
    pub fn add(&mut self, reference: u8, predicted: u8) -> Result<()> {
        let r = reference as usize;
        let p = predicted as usize;
        if r == 0 || p == 0 || r > self.k || p > self.k {
            return Err(CoreError::invalid("category id out of range"));
        }
        self.counts[(r - 1) * self.k + (p - 1)] += 1.0;
        Ok(())
    }

    /// Count at (reference row, predicted column), 0-based.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.counts[row * self.k + col]
    }

    /// Total number of recorded pairs.
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Fraction of pairs on the diagonal.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total <= 0.0 {
            return Err(CoreError::degenerate("confusion matrix is empty"));
        }
        let diag: f64 = (0..self.k).map(|i| self.at(i, i)).sum();
        Ok(diag / total)
    }

    fn margins(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; self.k];
        let mut cols = vec![0.0; self.k];
        for r in 0..self.k {
            for c in 0..self.k {
                rows[r] += self.at(r, c);
                cols[c] += self.at(r, c);
            }
        }
        (rows, cols)
    }
}

/// Single-measure absolute-agreement intraclass correlation ICC(A,1) for two
/// raters, from the two-way ANOVA mean squares:
/// (MS_R - MS_E) / (MS_R + MS_E + (2/n)(MS_C - MS_E)).
///
/// Pairs are (reference, predicted). Errors on fewer than two pairs or when
/// all values are identical (no variance to apportion).
pub fn icc_a1(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(CoreError::invalid("ICC needs at least two pairs"));
    }
    if pairs.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(CoreError::invalid("ICC needs finite scores"));
    }
    let nf = n as f64;
    let k = 2.0f64;
    let grand: f64 = pairs.iter().map(|p| p.0 + p.1).sum::<f64>() / (nf * k);
    let mean_ref: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_pred: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / nf;

    let mut ss_rows = 0.0;
    let mut ss_err = 0.0;
    let mut ss_total = 0.0;
    for &(a, b) in pairs {
        let subj = (a + b) / 2.0;
        ss_rows += (subj - grand) * (subj - grand);
        let ea = a - subj - mean_ref + grand;
        let eb = b - subj - mean_pred + grand;
        ss_err += ea * ea + eb * eb;
        ss_total += (a - grand) * (a - grand) + (b - grand) * (b - grand);
    }
    if ss_total <= 0.0 {
        return Err(CoreError::degenerate("scores have zero total variance"));
    }
    let ss_rows = k * ss_rows;
    let ss_cols = nf * ((mean_ref - grand) * (mean_ref - grand)
        + (mean_pred - grand) * (mean_pred - grand));
    let ms_r = ss_rows / (nf - 1.0);
    let ms_c = ss_cols / (k - 1.0);
    let ms_e = ss_err / ((nf - 1.0) * (k - 1.0));
    let denom = ms_r + (k - 1.0) * ms_e + (k / nf) * (ms_c - ms_e);
    if denom == 0.0 {
        return Err(CoreError::degenerate("ICC denominator is zero"));
    }
    Ok((ms_r - ms_e) / denom)
}

/// Cohen's linearly weighted kappa over a confusion matrix:
/// kappa = 1 - sum(w o) / sum(w e), with w_ij = |i - j| / (K - 1) and
/// expected counts e from the row and column margins.
pub fn weighted_kappa(conf: &Confusion) -> Result<f64> {
    let k = conf.k;
    if k < 2 {
        return Err(CoreError::invalid("kappa needs at least two categories"));
    }
    let total = conf.total();
    if total <= 0.0 {
        return Err(CoreError::invalid("kappa needs a non-empty confusion matrix"));
    }
    let (rows, cols) = conf.margins();
    let mut obs = 0.0;
    let mut exp = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = (i as f64 - j as f64).abs() / (k as f64 - 1.0);
            obs += w * conf.at(i, j);
            exp += w * rows[i] * cols[j] / total;
        }
    }
    if exp == 0.0 {
        return Err(CoreError::degenerate(
            "expected disagreement is zero (single occupied category)",
        ));
    }
    Ok(1.0 - obs / exp)
}

/// Bland-Altman agreement summary: mean difference and 1.96-SD limits.
#[derive(Clone, Copy, Debug)]
pub struct BlandAltman {
    /// Mean of predicted - reference.
    pub bias: f64,
    /// bias - 1.96 * sd.
    pub lo: f64,
    /// bias + 1.96 * sd.
    pub hi: f64,
}

/// Bland-Altman analysis of predicted - reference differences, with limits
/// at +-1.96 sample standard deviations (n - 1).
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    let n = pairs.len();
    if n < 2 {
        return Err(CoreError::invalid("Bland-Altman needs at least two pairs"));
    }
    let nf = n as f64;
    let diffs: Vec<f64> = pairs.iter().map(|&(r, p)| p - r).collect();
    let bias = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / (nf - 1.0);
    let sd = f64math::sqrt(var);
    Ok(BlandAltman {
        bias,
        lo: bias - 1.96 * sd,
        hi: bias + 1.96 * sd,
    })
}

/// Categorizes both scores of every pair under the scheme and tallies the
/// confusion matrix; returns it with the categorization accuracy.
pub fn categorize_and_confuse(
    pairs: &[(f64, f64)],
    scheme: RiskScheme,
) -> Result<(Confusion, f64)> {
    let mut conf = Confusion::new(scheme.n_categories());
    for &(reference, predicted) in pairs {
        conf.add(scheme.category(reference)?, scheme.category(predicted)?)?;
    }
    let accuracy = conf.accuracy()?;
    Ok((conf, accuracy))
}

/// Pearson correlation coefficient. Convenience output only.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(CoreError::invalid("correlation needs at least two pairs"));
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::degenerate("zero variance in correlation input"));
    }
    Ok(sxy / f64math::sqrt(sxx * syy))
}

/// Full agreement report between reference and predicted scores.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// ICC(A,1) between the score lists.
    pub icc: f64,
    /// Linearly weighted kappa over the categorized scores.
    pub kappa_linear: f64,
    /// Categorization accuracy.
    pub accuracy: f64,
    /// Confusion matrix of the categorized scores.
    pub confusion: Confusion,
    /// Bland-Altman bias and limits on the raw scores.
    pub bland_altman: BlandAltman,
    /// Scheme used for categorization.
    pub scheme: RiskScheme,
    /// Pearson correlation (convenience).
    pub pearson: f64,
}

/// Computes every agreement statistic between (reference, predicted) score
/// pairs under one risk scheme.
pub fn evaluate(pairs: &[(f64, f64)], scheme: RiskScheme) -> Result<EvalReport> {
    let icc = icc_a1(pairs)?;
    let (confusion, accuracy) = categorize_and_confuse(pairs, scheme)?;
    let kappa_linear = weighted_kappa(&confusion)?;
    let bland = bland_altman(pairs)?;
    let pearson = pearson(pairs)?;
    Ok(EvalReport {
        icc,
        kappa_linear,
        accuracy,
        confusion,
        bland_altman: bland,
        scheme,
        pearson,
    })
}
