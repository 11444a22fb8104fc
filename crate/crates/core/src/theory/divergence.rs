//! Discrete divergences and the risk-decomposition bounds.
//!
//! Everything here runs on finite discrete distributions where all
//! divergence terms are exact sums, so brute-force sweeps serve as oracles.
//! JS divergence uses natural log, hence the `ln 2` ceiling.

use crate::error::{Error, Result};

/// Probability vector over a finite outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    /// Validated constructor: entries non-negative, total within 1e-12 of 1.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("empty distribution".into()));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalize arbitrary non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("weights must be non-negative with positive sum".into()));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(Self { probs })
    }

    /// Point mass on one outcome.
    pub fn one_hot(support: usize, at: usize) -> Self {
        let mut probs = vec![0.0; support];
        probs[at] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> usize {
        self.probs.len()
    }
}

/// `sum p ln(p/q)` with the `0 ln 0 = 0` convention.
pub fn kl_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.support() != q.support() {
        return Err(Error::Shape("KL support mismatch".into()));
    }
    let mut s = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(q.probs.iter()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            s += pi * (pi / qi).ln();
        }
    }
    Ok(s)
}

/// Jensen-Shannon divergence `0.5 KL(P||J) + 0.5 KL(Q||J)` with
/// `J = (P+Q)/2`; symmetric and bounded by `ln 2`.
pub fn js_divergence(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.support() != q.support() {
        return Err(Error::Shape("JSD support mismatch".into()));
    }
    // one fused pass so the summation order is symmetric in (p, q) and
    // JSD(p,q) == JSD(q,p) bit-for-bit
    let mut s = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(q.probs.iter()) {
        let ji = 0.5 * (pi + qi);
        let tp = if pi > 0.0 { 0.5 * pi * (pi / ji).ln() } else { 0.0 };
        let tq = if qi > 0.0 { 0.5 * qi * (qi / ji).ln() } else { 0.0 };
        s += tp + tq;
    }
    // clamp tiny negative rounding residue
    Ok(s.max(0.0))
}

/// Outcome of a triangle-inequality check on `sqrt(JSD)`.
#[derive(Debug, Clone, Copy)]
pub struct TriangleCheck {
    pub holds: bool,
    /// `rhs - lhs`; non-negative when the inequality holds.
    pub slack: f64,
}

/// Check `sqrt(JSD(p,g)) <= sqrt(JSD(p,q)) + sqrt(JSD(q,g))`.
pub fn check_sqrt_jsd_triangle(
    p: &DiscreteDist,
    q: &DiscreteDist,
    g: &DiscreteDist,
) -> Result<TriangleCheck> {
    let lhs = js_divergence(p, g)?.sqrt();
    let rhs = js_divergence(p, q)?.sqrt() + js_divergence(q, g)?.sqrt();
    let slack = rhs - lhs;
    Ok(TriangleCheck {
        holds: slack >= -1e-12,
        slack,
    })
}

/// Joint distribution over a finite product space with per-factor supports.
#[derive(Debug, Clone)]
pub struct JointDist {
    supports: Vec<usize>,
    probs: Vec<f64>,
}

impl JointDist {
    pub fn new(supports: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let total: usize = supports.iter().product();
        if total != probs.len() {
            return Err(Error::Shape(format!(
                "joint over {supports:?} needs {total} entries, got {}",
                probs.len()
            )));
        }
        // reuse the scalar checks
        DiscreteDist::new(probs.clone())?;
        Ok(Self { supports, probs })
    }

    pub fn from_weights(supports: Vec<usize>, weights: &[f64]) -> Result<Self> {
        let d = DiscreteDist::from_weights(weights)?;
        Self::new(supports, d.probs)
    }

    pub fn factors(&self) -> usize {
        self.supports.len()
    }

    pub fn flat(&self) -> DiscreteDist {
        DiscreteDist {
            probs: self.probs.clone(),
        }
    }

    /// Marginal distribution of factor `m`.
    pub fn marginal(&self, m: usize) -> DiscreteDist {
        let mut probs = vec![0.0; self.supports[m]];
        for (idx, &p) in self.probs.iter().enumerate() {
            probs[self.coordinate(idx, m)] += p;
        }
        DiscreteDist { probs }
    }

    /// Independent joint built from this joint's marginals.
    pub fn product_of_marginals(&self) -> JointDist {
        let marginals: Vec<DiscreteDist> = (0..self.factors()).map(|m| self.marginal(m)).collect();
        product_joint(&marginals)
    }

    fn coordinate(&self, mut idx: usize, m: usize) -> usize {
        // row-major: the last factor varies fastest
        for f in (m + 1..self.supports.len()).rev() {
            idx /= self.supports[f];
        }
        idx % self.supports[m]
    }
}

/// Independent joint with the given factor marginals.
pub fn product_joint(marginals: &[DiscreteDist]) -> JointDist {
    let supports: Vec<usize> = marginals.iter().map(|m| m.support()).collect();
    let total: usize = supports.iter().product();
    let mut probs = vec![1.0; total];
    for (idx, p) in probs.iter_mut().enumerate() {
        let mut rem = idx;
        for (f, marg) in marginals.iter().enumerate().rev() {
            let coord = rem % supports[f];
            rem /= supports[f];
            *p *= marg.probs()[coord];
            let _ = f;
        }
    }
    JointDist { supports, probs }
}

/// The three-term decomposition of the joint source/target divergence.
#[derive(Debug, Clone, Copy)]
pub struct RiskDecomposition {
    /// `JSD(joint_S || joint_T)`.
    pub multi_risk: f64,
    /// `JSD(prod marg T || joint_T)` — target synergy, irreducible here.
    pub irreducible: f64,
    /// `JSD(prod marg T || prod marg S)` — representation shift.
    pub representation_risk: f64,
    /// `JSD(joint_S || prod marg S)` — source synergy.
    pub synergy_risk: f64,
    /// Metric-form bound on sqrt terms; provable via the triangle inequality.
    pub metric_holds: bool,
    pub metric_slack: f64,
    /// Additive-form comparison; not guaranteed, reported only.
    pub additive_holds: bool,
    pub additive_slack: f64,
}

/// Compute the decomposition terms and both bound forms for two joints
/// over the same finite product space.
pub fn check_risk_decomposition(
    joint_s: &JointDist,
    joint_t: &JointDist,
) -> Result<RiskDecomposition> {
    if joint_s.supports != joint_t.supports {
        return Err(Error::Shape("joint support mismatch".into()));
    }
    let prod_s = joint_s.product_of_marginals().flat();
    let prod_t = joint_t.product_of_marginals().flat();
    let flat_s = joint_s.flat();
    let flat_t = joint_t.flat();

    let multi_risk = js_divergence(&flat_s, &flat_t)?;
    let irreducible = js_divergence(&prod_t, &flat_t)?;
    let representation_risk = js_divergence(&prod_t, &prod_s)?;
    let synergy_risk = js_divergence(&flat_s, &prod_s)?;

    let metric_rhs = irreducible.sqrt() + representation_risk.sqrt() + synergy_risk.sqrt();
    let metric_slack = metric_rhs - multi_risk.sqrt();
    let additive_rhs = irreducible + representation_risk + synergy_risk;
    let additive_slack = additive_rhs - multi_risk;

    Ok(RiskDecomposition {
        multi_risk,
        irreducible,
        representation_risk,
        synergy_risk,
        metric_holds: metric_slack >= -1e-12,
        metric_slack,
        additive_holds: additive_slack >= -1e-12,
        additive_slack,
    })
}

/// Bound of the product-marginal divergence by per-modality divergences.
#[derive(Debug, Clone, Copy)]
pub struct UnimodalSumBound {
    /// `JSD(prod_m S_m || prod_m T_m)`.
    pub product_divergence: f64,
    /// `sum_m JSD(S_m || T_m)`.
    pub sum_of_unimodal: f64,
    /// Metric form: `sqrt(lhs) <= sum_m sqrt(JSD_m)`.
    pub metric_holds: bool,
    pub metric_slack: f64,
    /// Additive form, reported only.
    pub additive_holds: bool,
    pub additive_slack: f64,
}

/// Compare the divergence between two product distributions against the
/// per-factor divergences, in both metric and additive forms.
pub fn check_unimodal_sum_bound(
    marginals_s: &[DiscreteDist],
    marginals_t: &[DiscreteDist],
) -> Result<UnimodalSumBound> {
    if marginals_s.len() != marginals_t.len() || marginals_s.is_empty() {
        return Err(Error::Shape("marginal list mismatch".into()));
    }
    let prod_s = product_joint(marginals_s).flat();
    let prod_t = product_joint(marginals_t).flat();
    let lhs = js_divergence(&prod_s, &prod_t)?;
    let mut sum = 0.0;
    let mut sqrt_sum = 0.0;
    for (s, t) in marginals_s.iter().zip(marginals_t.iter()) {
        let d = js_divergence(s, t)?;
        sum += d;
        sqrt_sum += d.sqrt();
    }
    let metric_slack = sqrt_sum - lhs.sqrt();
    let additive_slack = sum - lhs;
    Ok(UnimodalSumBound {
        product_divergence: lhs,
        sum_of_unimodal: sum,
        metric_holds: metric_slack >= -1e-12,
        metric_slack,
        additive_holds: additive_slack >= -1e-12,
        additive_slack,
    })
}
