//! Smooth-L1 location loss, the positive/negative balanced cross-entropy,
//! the per-branch classification + regression loss and the weighted
//! multi-branch totals.

use crate::error::{invalid, Result};
use crate::geometry::RegressionTarget;
use crate::tensor::dense::log_sum_exp;

/// Lower clamp on probabilities fed to `−log`.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean of the four smooth-L1 residuals between target and prediction.
pub fn loc_loss(t: &RegressionTarget, t_hat: &RegressionTarget) -> f64 {
    let (a, b) = (t.to_array(), t_hat.to_array());
    0.25 * (0..4).map(|j| smooth_l1(b[j] - a[j])).sum::<f64>()
}

/// Gradient of [`loc_loss`] with respect to the prediction.
pub fn loc_loss_grad(t: &RegressionTarget, t_hat: &RegressionTarget) -> [f64; 4] {
    let (a, b) = (t.to_array(), t_hat.to_array());
    std::array::from_fn(|j| 0.25 * smooth_l1_grad(b[j] - a[j]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Probabilities that hit [`PROB_FLOOR`].
    pub clamped: usize,
}

fn mean_or_zero(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `1/(1+γ)·mean(−log p⁺) + γ/(1+γ)·mean(−log p₀⁻)`; an empty set contributes 0.
pub fn balanced_cross_entropy(pos_probs: &[f64], neg_bg_probs: &[f64], gamma: f64) -> Result<CrossEntropy> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return invalid(format!("gamma must be non-negative, got {gamma}"));
    }
    let mut clamped = 0;
    let mut nll = |p: f64| -> Result<f64> {
        if !(p.is_finite() && p <= 1.0 + 1e-12) || p < 0.0 {
            return invalid(format!("probability {p} outside [0, 1]"));
        }
        if p < PROB_FLOOR {
            clamped += 1;
        }
        Ok(-p.max(PROB_FLOOR).ln())
    };
    let mut pos = 0.0;
    for &p in pos_probs {
        pos += nll(p)?;
    }
    let mut neg = 0.0;
    for &p in neg_bg_probs {
        neg += nll(p)?;
    }
    let value = mean_or_zero(pos, pos_probs.len()) / (1.0 + gamma)
        + gamma / (1.0 + gamma) * mean_or_zero(neg, neg_bg_probs.len());
    Ok(CrossEntropy { value, clamped })
}

/// The training label of one sample fed to [`branch_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLabel {
    /// `0` for background, `1..=K` for objects.
    pub class: usize,
    /// Regression target; required for positives.
    pub target: Option<RegressionTarget>,
}

/// Decomposed loss of one branch (or of the detection head).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BranchTerms {
    pub cls: f64,
    /// Mean location loss over positives, before the λ factor.
    pub loc: f64,
    pub lambda: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

impl BranchTerms {
    pub fn value(&self) -> f64 {
        self.cls + self.lambda * self.loc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchLoss {
    pub terms: BranchTerms,
    pub clamped: usize,
    /// Gradient w.r.t. the logits, `n × classes` row-major.
    pub d_logits: Vec<f64>,
    /// Gradient w.r.t. the predicted offsets, `n × 4`.
    pub d_deltas: Vec<f64>,
}

/// Classification (balanced cross-entropy over the sample set) plus `λ` times
/// the location loss averaged over positives.
///
/// `logits` holds `classes` softmax inputs per sample and `deltas` four
/// predicted offsets per sample, aligned with `labels`.
pub fn branch_loss(
    labels: &[SampleLabel],
    logits: &[f64],
    classes: usize,
    deltas: &[f64],
    lambda: f64,
    gamma: f64,
) -> Result<BranchLoss> {
    let n = labels.len();
    if classes < 2 || logits.len() != n * classes || deltas.len() != n * 4 {
        return invalid(format!(
            "branch_loss: {n} labels, {} logits ({classes} classes), {} deltas",
            logits.len(),
            deltas.len()
        ));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) || !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid("branch_loss: lambda and gamma must be finite and non-negative");
    }
    if logits.iter().chain(deltas).any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("branch_loss input"));
    }
    let num_pos = labels.iter().filter(|l| l.class > 0).count();
    let num_neg = n - num_pos;
    let w_pos = if num_pos > 0 { 1.0 / ((1.0 + gamma) * num_pos as f64) } else { 0.0 };
    let w_neg = if num_neg > 0 { gamma / ((1.0 + gamma) * num_neg as f64) } else { 0.0 };
    let max_nll = -PROB_FLOOR.ln();

    let mut cls = 0.0;
    let mut loc = 0.0;
    let mut clamped = 0;
    let mut d_logits = vec![0.0; n * classes];
    let mut d_deltas = vec![0.0; n * 4];
    for (i, l) in labels.iter().enumerate() {
        if l.class >= classes {
            return invalid(format!("label {} with only {classes} classes", l.class));
        }
        let z = &logits[i * classes..(i + 1) * classes];
        let lse = log_sum_exp(z);
        let mut nll = lse - z[l.class];
        if nll > max_nll {
            clamped += 1;
            nll = max_nll;
        }
        let w = if l.class > 0 { w_pos } else { w_neg };
        cls += w * nll;
        // Softmax gradient is kept even when the value is clamped.
        let g = &mut d_logits[i * classes..(i + 1) * classes];
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = w * ((z[c] - lse).exp() - if c == l.class { 1.0 } else { 0.0 });
        }
        if l.class > 0 {
            let t = l
                .target
                .ok_or_else(|| crate::Error::Invalid(format!("positive sample {i} without target")))?;
            let d = &deltas[i * 4..(i + 1) * 4];
            let t_hat = RegressionTarget::from_array([d[0], d[1], d[2], d[3]]);
            loc += loc_loss(&t, &t_hat) / num_pos as f64;
            let gl = loc_loss_grad(&t, &t_hat);
            for j in 0..4 {
                d_deltas[i * 4 + j] = lambda * gl[j] / num_pos as f64;
            }
        }
    }
    Ok(BranchLoss {
        terms: BranchTerms {
            cls,
            loc,
            lambda,
            num_pos,
            num_neg,
        },
        clamped,
        d_logits,
        d_deltas,
    })
}

/// One weighted entry of a [`LossReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedTerms {
    pub terms: BranchTerms,
    pub alpha: f64,
}

/// Total multi-task loss and its exact decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_branch: Vec<WeightedTerms>,
    pub detection: Option<WeightedTerms>,
}

impl LossReport {
    /// Re-sums the decomposition; equals `total` by construction.
    pub fn recompute(&self) -> f64 {
        self.per_branch
            .iter()
            .chain(self.detection.iter())
            .map(|w| w.alpha * w.terms.value())
            .sum()
    }

    /// Elementwise mean of several reports with the same layout.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> Option<WeightedTerms>| -> Option<WeightedTerms> {
            let base = f(first)?;
            let mut t = BranchTerms { lambda: base.terms.lambda, ..Default::default() };
            for r in reports {
                let w = f(r)?;
                t.cls += w.terms.cls / n;
                t.loc += w.terms.loc / n;
                t.num_pos += w.terms.num_pos;
                t.num_neg += w.terms.num_neg;
            }
            Some(WeightedTerms { terms: t, alpha: base.alpha })
        };
        let per_branch = (0..first.per_branch.len())
            .map(|m| avg(&|r: &LossReport| r.per_branch.get(m).copied()).expect("same layout"))
            .collect();
        let detection = avg(&|r: &LossReport| r.detection);
        Some(LossReport {
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            per_branch,
            detection,
        })
    }
}

/// `Σ α_m·(cls_m + λ·loc_m)`, plus `α_det·(detection)` when present.
pub fn total_loss(
    branches: &[BranchTerms],
    alphas: &[f64],
    detection: Option<BranchTerms>,
    alpha_det: f64,
) -> Result<LossReport> {
    if branches.len() != alphas.len() {
        return invalid(format!("{} branch losses for {} weights", branches.len(), alphas.len()));
    }
    let per_branch: Vec<WeightedTerms> = branches
        .iter()
        .zip(alphas)
        .map(|(&terms, &alpha)| WeightedTerms { terms, alpha })
        .collect();
    let detection = detection.map(|terms| WeightedTerms { terms, alpha: alpha_det });
    let mut report = LossReport {
        total: 0.0,
        per_branch,
        detection,
    };
    report.total = report.recompute();
    Ok(report)
}
