//! Gaussian-approximation mutual information between feature blocks.
//!
//! For blocks `Z_1, ..., Z_M` with joint covariance `S` and per-block
//! covariances `S_m`, the Gaussian MI (total correlation) is
//! `0.5 ln(prod_m det S_m / det S)`. It is zero for independent blocks and
//! invariant under separate invertible linear maps of each block.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Result of a synergy estimate.
#[derive(Debug, Clone, Copy)]
pub struct SynergyEstimate {
    /// Estimated mutual information in nats (clamped at 0 from below).
    pub mi: f64,
    /// Whether a ridge was added to rescue a singular covariance.
    pub ridged: bool,
}

fn logdet_with_ridge(mut s: DMatrix<f64>, ridge: f64) -> Result<(f64, bool)> {
    // Cholesky can "succeed" on a rank-deficient matrix with a vanishing
    // pivot from rounding noise, so check the pivot ratio as well.
    if let Some(c) = s.clone().cholesky() {
        let diag = c.l().diagonal();
        let pmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let pmax = diag.iter().cloned().fold(0.0f64, f64::max);
        if pmin > 0.0 && (pmin / pmax) * (pmin / pmax) > 1e-10 {
            return Ok((diag.iter().map(|v| 2.0 * v.ln()).sum(), false));
        }
    }
    for i in 0..s.nrows() {
        s[(i, i)] += ridge;
    }
    let c = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance singular even with ridge".into()))?;
    Ok((c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum(), true))
}

/// Estimate the Gaussian MI between paired feature blocks.
///
/// `blocks[m]` holds one row per sample; all blocks must agree on the row
/// count, and at least 500 paired samples are required for the estimate to
/// be meaningful. Singular covariances are regularized with a 1e-6 ridge
/// and flagged in the result.
pub fn estimate_synergy(blocks: &[Vec<Vec<f64>>]) -> Result<SynergyEstimate> {
    if blocks.len() < 2 {
        return Err(Error::Contract("need at least two feature blocks".into()));
    }
    let n = blocks[0].len();
    if n < 500 {
        return Err(Error::Contract(format!(
            "need at least 500 paired samples, got {n}"
        )));
    }
    if blocks.iter().any(|b| b.len() != n) {
        return Err(Error::Shape("blocks disagree on sample count".into()));
    }
    let dims: Vec<usize> = blocks.iter().map(|b| b[0].len()).collect();
    let total: usize = dims.iter().sum();

    // stack into (n x total) and center
    let mut data = DMatrix::zeros(n, total);
    for i in 0..n {
        let mut off = 0;
        for (b, &dm) in blocks.iter().zip(dims.iter()) {
            if b[i].len() != dm {
                return Err(Error::Shape("ragged feature block".into()));
            }
            for j in 0..dm {
                data[(i, off + j)] = b[i][j];
            }
            off += dm;
        }
    }
    let means: Vec<f64> = (0..total)
        .map(|j| data.column(j).iter().sum::<f64>() / n as f64)
        .collect();
    for i in 0..n {
        for j in 0..total {
            data[(i, j)] -= means[j];
        }
    }
    let cov = &data.transpose() * &data / (n as f64 - 1.0);

    let ridge = 1e-6;
    let (joint_logdet, mut ridged) = logdet_with_ridge(cov.clone(), ridge)?;
    let mut block_logdets = 0.0;
    let mut off = 0;
    for &dm in &dims {
        let sub = cov.view((off, off), (dm, dm)).into_owned();
        let (ld, r) = logdet_with_ridge(sub, ridge)?;
        block_logdets += ld;
        ridged |= r;
        off += dm;
    }
    Ok(SynergyEstimate {
        mi: (0.5 * (block_logdets - joint_logdet)).max(0.0),
        ridged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut impl Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn independent_blocks_have_near_zero_mi() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 10_000;
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| gauss(&mut rng)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| gauss(&mut rng)).collect()).collect();
        let est = estimate_synergy(&[a, b]).unwrap();
        assert!(est.mi.abs() < 0.02, "independent MI = {}", est.mi);
        assert!(!est.ridged);
    }

    #[test]
    fn correlated_blocks_match_closed_form() {
        // per-coordinate correlation rho: MI = -0.5 * sum ln(1 - rho^2)
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let rho: f64 = 0.99;
        let n = 20_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let za: Vec<f64> = (0..4).map(|_| gauss(&mut rng)).collect();
            let zb: Vec<f64> = za
                .iter()
                .map(|&x| rho * x + (1.0 - rho * rho).sqrt() * gauss(&mut rng))
                .collect();
            a.push(za);
            b.push(zb);
        }
        let est = estimate_synergy(&[a, b]).unwrap();
        let expect = -0.5 * 4.0 * (1.0 - rho * rho).ln();
        assert!(est.mi > 2.0, "MI should exceed 2 nats, got {}", est.mi);
        assert!(
            (est.mi - expect).abs() / expect < 0.15,
            "MI {} vs closed form {}",
            est.mi,
            expect
        );
    }

    #[test]
    fn invariant_under_blockwise_linear_maps() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let rho: f64 = 0.6;
        let n = 20_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let za: Vec<f64> = (0..3).map(|_| gauss(&mut rng)).collect();
            let zb: Vec<f64> = za
                .iter()
                .map(|&x| rho * x + (1.0 - rho * rho).sqrt() * gauss(&mut rng))
                .collect();
            a.push(za);
            b.push(zb);
        }
        let base = estimate_synergy(&[a.clone(), b.clone()]).unwrap().mi;

        // apply different invertible maps to each block
        let ta = [[2.0, 0.5, 0.0], [0.0, 1.0, -0.3], [0.1, 0.0, 0.7]];
        let tb = [[1.0, -1.0, 0.2], [0.0, 0.5, 0.0], [0.3, 0.0, 1.1]];
        let apply = |t: &[[f64; 3]; 3], v: &[f64]| -> Vec<f64> {
            (0..3)
                .map(|i| (0..3).map(|j| t[i][j] * v[j]).sum())
                .collect()
        };
        let a2: Vec<Vec<f64>> = a.iter().map(|v| apply(&ta, v)).collect();
        let b2: Vec<Vec<f64>> = b.iter().map(|v| apply(&tb, v)).collect();
        let mapped = estimate_synergy(&[a2, b2]).unwrap().mi;
        assert!(
            (base - mapped).abs() < 0.05,
            "MI changed under block-linear maps: {base} vs {mapped}"
        );
    }

    #[test]
    fn degenerate_covariance_gets_ridged() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let n = 600;
        // second coordinate duplicates the first: singular block covariance
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x = gauss(&mut rng);
                vec![x, x]
            })
            .collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| vec![gauss(&mut rng)]).collect();
        let est = estimate_synergy(&[a, b]).unwrap();
        assert!(est.ridged);
        assert!(est.mi.is_finite());
    }

    #[test]
    fn too_few_samples_rejected() {
        let a = vec![vec![0.0]; 100];
        let b = vec![vec![0.0]; 100];
        assert!(matches!(
            estimate_synergy(&[a, b]),
            Err(Error::Contract(_))
        ));
    }
}
