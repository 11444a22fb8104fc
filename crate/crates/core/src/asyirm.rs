//! Invariance losses for the radial classifier:
//!
//! - cross-entropy on the two antisymmetric branch logits,
//! - a cross-domain gradient-alignment penalty (the per-domain average
//!   feature gradients of the classification loss are pushed together,
//!   summed over all domain pairs and branches),
//! - an angular hinge loss pulling same-domain features into tight cones
//!   and pushing different-domain features apart,
//! - the weighted total objective with a per-component breakdown.
//!
//! The alignment penalty is differentiated *through* the per-domain
//! gradients by default (the gradients are recorded on the tape and the
//! penalty's backward pass reaches the encoder). A detached first-order
//! mode is available for ablations: features enter the penalty as leaves,
//! so only the classifier parameter feels it.

use crate::error::{Error, Result};
use crate::model::{branch_logits, BoundModel, ClassifierKind, Forward};
use crate::numerics::autodiff::{grad, softmax_ce_rows, Tape, Var};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Margins and temperature of the angular loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AngularConfig {
    pub q_pos: f64,
    pub q_neg: f64,
    pub tau: f64,
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self {
            q_pos: 0.9,
            q_neg: 0.3,
            tau: 0.1,
        }
    }
}

impl AngularConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.q_pos) || !(-1.0..=1.0).contains(&self.q_neg) {
            return Err(Error::Config("angular margins must lie in [-1, 1]".into()));
        }
        if self.q_neg >= self.q_pos {
            return Err(Error::Config("need q_neg < q_pos".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the four auxiliary terms added to the classification loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub irm: f64,
    pub angular: f64,
    pub mmsd: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            irm: 0.5,
            angular: 0.5,
            mmsd: 1.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.irm, self.angular, self.mmsd, self.aux]
            .iter()
            .any(|w| *w < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which branch a domain gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchId {
    Modality(usize),
    Global,
}

/// Average feature gradient of the classification loss over one domain's
/// batch slice, for one branch.
pub struct DomainGradient<'t> {
    pub domain: usize,
    pub branch: BranchId,
    /// `(1 x F)` average gradient, recorded on the tape.
    pub grad: Var<'t>,
}

/// How the alignment penalty treats the feature path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrmMode {
    /// Differentiate through the per-domain gradients (full second order).
    SecondOrder,
    /// Features detached; the penalty only trains the classifier head.
    Detached,
}

/// Mean radial cross-entropy of a `(B x 2)` logit batch.
pub fn radial_ce_mean<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(softmax_ce_rows(logits, labels)?.mean_all())
}

/// Per-domain average gradients of the branch classification loss with
/// respect to the branch features, recorded for further differentiation.
///
/// `head`/`kind` rebuild the classifier on (possibly detached) features so
/// the gradient graph is self-contained.
pub fn domain_gradients<'t>(
    features: Var<'t>,
    head: Var<'t>,
    kind: ClassifierKind,
    branch: BranchId,
    labels: &[usize],
    domains: &[usize],
    mode: IrmMode,
) -> Result<Vec<DomainGradient<'t>>> {
    let feats = match mode {
        IrmMode::SecondOrder => features,
        IrmMode::Detached => features.detach(),
    };
    let mut uniq: Vec<usize> = domains.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() < 2 {
        return Err(Error::Contract(format!(
            "gradient alignment needs >= 2 domains in the batch, got {}",
            uniq.len()
        )));
    }
    let b = branch_logits(feats, head, kind);
    let ce = softmax_ce_rows(b.logits, labels)?;
    let f = feats.shape()[1];
    let mut out = Vec::with_capacity(uniq.len());
    for &e in &uniq {
        let idx: Vec<usize> = domains
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| (d == e).then_some(i))
            .collect();
        let loss_e = ce.select_rows(Rc::new(idx.clone())).mean_all();
        let g = grad(loss_e, &[feats], true)?[0];
        // rows outside this domain carry zero adjoint; summing the domain's
        // rows of the (1/n_e)-scaled adjoint yields the average gradient
        let avg = g
            .select_rows(Rc::new(idx))
            .sum_rows()
            .reshape(vec![1, f]);
        out.push(DomainGradient {
            domain: e,
            branch,
            grad: avg,
        });
    }
    Ok(out)
}

/// Sum of squared Euclidean distances between per-domain average gradients
/// over all domain pairs, summed across branches. Zero iff all domain
/// gradients coincide per branch.
pub fn irm_penalty<'t>(tape: &'t Tape, grads: &[DomainGradient<'t>]) -> Result<Var<'t>> {
    if grads.is_empty() {
        return Err(Error::Contract("no domain gradients given".into()));
    }
    let mut total = tape.scalar(0.0);
    let mut branches: Vec<BranchId> = grads.iter().map(|g| g.branch).collect();
    branches.dedup();
    for branch in branches {
        let group: Vec<&DomainGradient> =
            grads.iter().filter(|g| g.branch == branch).collect();
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let diff = group[i].grad.sub(group[j].grad);
                total = total.add(diff.mul(diff).sum_all());
            }
        }
    }
    Ok(total)
}

/// Angular hinge loss over one feature batch.
///
/// Features are L2-normalized internally (zero rows stay zero). Same-domain
/// pairs pay `max(0, q_pos - cos)/tau`, different-domain pairs pay
/// `max(0, cos - q_neg)/tau`; each set is averaged and an empty set
/// contributes nothing.
pub fn angular_loss<'t>(
    tape: &'t Tape,
    features: Var<'t>,
    domains: &[usize],
    cfg: &AngularConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let b = features.shape()[0];
    if domains.len() != b {
        return Err(Error::Shape("domain labels disagree with batch".into()));
    }
    let ones = tape.constant(Tensor::matrix(b, 1, vec![1.0; b])?);
    let inv_norm = ones.safe_div(features.l2_norm_rows());
    let unit = features.mul_col_vec(inv_norm);
    let cos = unit.matmul(unit.t())?;

    let mut pos_mask = vec![0.0; b * b];
    let mut neg_mask = vec![0.0; b * b];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..b {
        for j in i + 1..b {
            if domains[i] == domains[j] {
                pos_mask[i * b + j] = 1.0;
                n_pos += 1;
            } else {
                neg_mask[i * b + j] = 1.0;
                n_neg += 1;
            }
        }
    }
    let mut loss = tape.scalar(0.0);
    if n_pos > 0 {
        let hinge = cos.neg().add_scalar(cfg.q_pos).relu();
        let masked = hinge.mul_const_bcast(Rc::new(Tensor::matrix(b, b, pos_mask)?));
        loss = loss.add(masked.sum_all().mul_scalar(1.0 / (n_pos as f64 * cfg.tau)));
    }
    if n_neg > 0 {
        let hinge = cos.add_scalar(-cfg.q_neg).relu();
        let masked = hinge.mul_const_bcast(Rc::new(Tensor::matrix(b, b, neg_mask)?));
        loss = loss.add(masked.sum_all().mul_scalar(1.0 / (n_neg as f64 * cfg.tau)));
    }
    Ok(loss)
}

/// Switches for the optional loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub angular_cfg: AngularConfig,
    pub irm_mode: IrmMode,
    /// Apply the gradient-alignment penalty.
    pub radial_align: bool,
    /// Apply the angular separation loss.
    pub angular: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            angular_cfg: AngularConfig::default(),
            irm_mode: IrmMode::SecondOrder,
            radial_align: true,
            angular: true,
        }
    }
}

/// The total objective and its reported components (all tape scalars).
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub cls: Var<'t>,
    pub irm: Var<'t>,
    pub angular: Var<'t>,
    pub mmsd: Var<'t>,
    pub aux: Var<'t>,
}

impl LossBreakdown<'_> {
    /// Weighted recombination of the reported components.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        self.cls.item()
            + w.irm * self.irm.item()
            + w.angular * self.angular.item()
            + w.mmsd * self.mmsd.item()
            + w.aux * self.aux.item()
    }
}

/// Assemble the full training objective from a forward pass:
/// classification CE on every branch, plus the weighted alignment,
/// angular, pretext (passed in), and auxiliary terms.
pub fn total_loss<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'t>,
    fwd: &Forward<'t>,
    labels: &[usize],
    domains: &[usize],
    opts: &LossOptions,
    mmsd_term: Option<Var<'t>>,
) -> Result<LossBreakdown<'t>> {
    opts.weights.validate()?;
    let kind = bound.config.classifier;

    let mut cls = radial_ce_mean(fwd.global.logits, labels)?;
    for b in &fwd.branches {
        cls = cls.add(radial_ce_mean(b.logits, labels)?);
    }

    let branch_list = |fwd: &Forward<'t>| -> Vec<(BranchId, Var<'t>, Var<'t>)> {
        let mut v: Vec<(BranchId, Var<'t>, Var<'t>)> = fwd
            .branches
            .iter()
            .enumerate()
            .map(|(m, b)| (BranchId::Modality(m), b.features, bound.branch_head(m)))
            .collect();
        v.push((BranchId::Global, fwd.global.features, bound.global_head()));
        v
    };

    let irm = if opts.radial_align && opts.weights.irm > 0.0 {
        let mut all = Vec::new();
        for (id, feats, head) in branch_list(fwd) {
            all.extend(domain_gradients(
                feats,
                head,
                kind,
                id,
                labels,
                domains,
                opts.irm_mode,
            )?);
        }
        irm_penalty(tape, &all)?
    } else {
        tape.scalar(0.0)
    };

    let angular = if opts.angular && opts.weights.angular > 0.0 {
        let mut a = angular_loss(tape, fwd.global.features, domains, &opts.angular_cfg)?;
        for b in &fwd.branches {
            a = a.add(angular_loss(tape, b.features, domains, &opts.angular_cfg)?);
        }
        a
    } else {
        tape.scalar(0.0)
    };

    let mmsd = mmsd_term.unwrap_or_else(|| tape.scalar(0.0));
    let aux = radial_ce_mean(fwd.aux_logits, labels)?;

    let total = cls
        .add(irm.mul_scalar(opts.weights.irm))
        .add(angular.mul_scalar(opts.weights.angular))
        .add(mmsd.mul_scalar(opts.weights.mmsd))
        .add(aux.mul_scalar(opts.weights.aux));

    Ok(LossBreakdown {
        total,
        cls,
        irm,
        angular,
        mmsd,
        aux,
    })
}
