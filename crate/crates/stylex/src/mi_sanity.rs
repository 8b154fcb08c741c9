//! Standalone Gaussian validation of the MI estimators.
//!
//! Jointly Gaussian pairs with per-dimension correlation rho have the
//! closed-form MI -(d/2) log(1 - rho^2) nats, which makes them an exact
//! oracle for the trained statistics-network bounds: the JSD estimate
//! must sit at -2 log 2 under independence and rise with rho; the
//! Donsker-Varadhan estimate must lower-bound the true MI.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};
use crate::losses::{mine_jsd_grads, mine_kl_grads};
use crate::models::StatisticsNetwork;
use crate::nn::{Adam, Parameterized};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GaussianPairSpec {
    pub dimension: usize,
    pub rho: f64,
}

impl GaussianPairSpec {
    pub fn new(dimension: usize, rho: f64) -> Result<Self> {
        if dimension < 1 {
            return Err(StylexError::Config("dimension must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(StylexError::Config(format!("rho {rho} outside [0, 1)")));
        }
        Ok(GaussianPairSpec { dimension, rho })
    }

    /// Closed-form MI in nats: -(d/2) log(1 - rho^2).
    pub fn true_mi(&self) -> f64 {
        -(self.dimension as f64 / 2.0) * (1.0 - self.rho * self.rho).ln()
    }
}

/// v = rho * u + sqrt(1 - rho^2) * noise, per dimension.
pub fn sample_pairs(
    spec: &GaussianPairSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let d = spec.dimension;
    let scale = (1.0 - spec.rho * spec.rho).sqrt();
    let mut u = Array2::zeros((n, d));
    let mut v = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let a: f64 = rng.sample(StandardNormal);
            let noise: f64 = rng.sample(StandardNormal);
            u[[i, j]] = a;
            v[[i, j]] = spec.rho * a + scale * noise;
        }
    }
    (u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Jsd,
    Kl,
}

impl Estimator {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsd" => Ok(Estimator::Jsd),
            "kl" => Ok(Estimator::Kl),
            other => Err(StylexError::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiTrace {
    pub spec: GaussianPairSpec,
    pub estimator: Estimator,
    pub steps: usize,
    pub per_step: Vec<f64>,
    /// Estimate of the trained network on a fresh evaluation batch.
    pub final_estimate: f64,
    pub true_mi: f64,
}

/// Train a fresh statistics network on sampled pairs against shuffled
/// marginals and return the per-step estimate trace plus a held-out
/// final estimate.
pub fn estimate_mi(
    spec: &GaussianPairSpec,
    estimator: Estimator,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MiTrace> {
    let batch = 256;
    let hidden = 128;
    let mut sn = StatisticsNetwork::with_input_dims(spec.dimension, spec.dimension, hidden, rng);
    let mut opt = Adam::new(1e-3);
    let mut per_step = Vec::with_capacity(steps);

    for _ in 0..steps {
        let (u, v) = sample_pairs(spec, batch, rng);
        // within-batch shuffle preserves v's marginal exactly
        let mut idx: Vec<usize> = (0..batch).collect();
        idx.shuffle(rng);
        let mut v_shuffled = Array2::zeros(v.raw_dim());
        for (row, &i) in idx.iter().enumerate() {
            v_shuffled.row_mut(row).assign(&v.row(i));
        }

        let (t_joint, joint_cache) = sn.forward_train(&u, &v)?;
        let (t_marg, marg_cache) = sn.forward_train(&u, &v_shuffled)?;
        let (estimate, dt_joint, dt_marg) = match estimator {
            Estimator::Jsd => mine_jsd_grads(t_joint.view(), t_marg.view())?,
            Estimator::Kl => mine_kl_grads(t_joint.view(), t_marg.view())?,
        };
        per_step.push(estimate);
        sn.backward(&joint_cache, &dt_joint.mapv(|x| -x));
        sn.backward(&marg_cache, &dt_marg.mapv(|x| -x));
        let mut params = sn.params_mut();
        opt.step(&mut params);
    }

    // held-out evaluation with a large fresh batch
    let eval_n = 4096;
    let (u, v) = sample_pairs(spec, eval_n, rng);
    let mut idx: Vec<usize> = (0..eval_n).collect();
    idx.shuffle(rng);
    let mut v_shuffled = Array2::zeros(v.raw_dim());
    for (row, &i) in idx.iter().enumerate() {
        v_shuffled.row_mut(row).assign(&v.row(i));
    }
    let t_joint = sn.forward(&u, &v)?;
    let t_marg = sn.forward(&u, &v_shuffled)?;
    let final_estimate = match estimator {
        Estimator::Jsd => mine_jsd_grads(t_joint.view(), t_marg.view())?.0,
        Estimator::Kl => mine_kl_grads(t_joint.view(), t_marg.view())?.0,
    };

    Ok(MiTrace {
        spec: *spec,
        estimator,
        steps,
        per_step,
        final_estimate,
        true_mi: spec.true_mi(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    const TWO_LOG_2: f64 = 1.3862943611198906;

    fn correlation(u: &Array2<f64>, v: &Array2<f64>) -> f64 {
        let n = u.nrows() as f64;
        let mu_u = u.mean().unwrap();
        let mu_v = v.mean().unwrap();
        let mut cov = 0.0;
        let mut var_u = 0.0;
        let mut var_v = 0.0;
        for (a, b) in u.iter().zip(v.iter()) {
            cov += (a - mu_u) * (b - mu_v);
            var_u += (a - mu_u) * (a - mu_u);
            var_v += (b - mu_v) * (b - mu_v);
        }
        cov / n / ((var_u / n).sqrt() * (var_v / n).sqrt())
    }

    #[test]
    fn spec_validation_and_true_mi() {
        assert!(GaussianPairSpec::new(0, 0.5).is_err());
        assert!(GaussianPairSpec::new(2, 1.0).is_err());
        assert!(GaussianPairSpec::new(2, -0.1).is_err());
        assert_eq!(GaussianPairSpec::new(3, 0.0).unwrap().true_mi(), 0.0);
        let mi = GaussianPairSpec::new(1, 0.9).unwrap().true_mi();
        assert!((mi - 0.8303656034095901).abs() < 1e-9);
    }

    #[test]
    fn sampled_pairs_have_requested_correlation() {
        let spec = GaussianPairSpec::new(1, 0.0).unwrap();
        let (u, v) = sample_pairs(&spec, 10_000, &mut derive_rng(1, "pairs"));
        assert!(correlation(&u, &v).abs() <= 0.05);

        let spec = GaussianPairSpec::new(1, 0.9).unwrap();
        let (u, v) = sample_pairs(&spec, 10_000, &mut derive_rng(2, "pairs"));
        let c = correlation(&u, &v);
        assert!((c - 0.9).abs() <= 0.02, "corr {c}");
    }

    #[test]
    fn jsd_estimates_never_exceed_zero() {
        let spec = GaussianPairSpec::new(2, 0.5).unwrap();
        let trace = estimate_mi(&spec, Estimator::Jsd, 60, &mut derive_rng(3, "mi")).unwrap();
        for (i, &e) in trace.per_step.iter().enumerate() {
            assert!(e <= 0.0, "step {i} estimate {e} above 0");
        }
        assert!(trace.final_estimate <= 0.0);
    }

    #[test]
    fn estimates_grow_with_rho() {
        // averaged over 3 seeds, estimates are monotone in rho
        let rhos = [0.0, 0.5, 0.9];
        let mut means = [0.0f64; 3];
        for seed in 0..3u64 {
            for (i, &rho) in rhos.iter().enumerate() {
                let spec = GaussianPairSpec::new(2, rho).unwrap();
                let trace = estimate_mi(
                    &spec,
                    Estimator::Jsd,
                    150,
                    &mut derive_rng(10 + seed, "mono"),
                )
                .unwrap();
                means[i] += trace.final_estimate / 3.0;
            }
        }
        assert!(
            means[0] <= means[1] && means[1] <= means[2],
            "estimates not monotone: {means:?}"
        );
        assert!((means[0] + TWO_LOG_2).abs() < 0.1, "rho=0 should sit near the floor");
    }
}
