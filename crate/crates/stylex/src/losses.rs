//! Loss functions and MI estimators: InfoNCE, Gaussian KLD, reconstruction,
//! the combined CVAE objective, and the two statistics-network bounds
//! (Jensen–Shannon form used in training, Donsker–Varadhan form kept for
//! diagnostics).
//!
//! Every loss ships an analytic gradient companion; finite-difference
//! checks live in the tests.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_recon: f64,
    pub lambda_mine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 0.1,
            lambda_recon: 1.0,
            lambda_mine: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kl < 0.0 || self.lambda_recon < 0.0 || self.lambda_mine < 0.0 {
            return Err(StylexError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Overflow-safe softplus log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// InfoNCE over a batch of queries against one positive each and a shared
/// negative set: mean_n -log( e^{q·k+/τ} / (e^{q·k+/τ} + Σ_i e^{q·k-_i/τ}) ).
///
/// All vectors are expected unit-norm (checked loosely in debug builds).
pub fn info_nce(
    q: ArrayView2<f64>,
    k_pos: ArrayView2<f64>,
    k_negs: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    Ok(info_nce_grads(q, k_pos, k_negs, tau)?.0)
}

/// Gradients of [`info_nce`] with respect to queries, positives, and the
/// negative set (the last summed over queries, matching its sharing).
pub struct InfoNceGrads {
    pub dq: Array2<f64>,
    pub dk_pos: Array2<f64>,
    pub dk_negs: Array2<f64>,
}

pub fn info_nce_grads(
    q: ArrayView2<f64>,
    k_pos: ArrayView2<f64>,
    k_negs: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, InfoNceGrads)> {
    if tau <= 0.0 {
        return Err(StylexError::Contract(format!(
            "InfoNCE temperature must be positive, got {tau}"
        )));
    }
    let n = q.nrows();
    let k = k_negs.nrows();
    if k_pos.nrows() != n || q.ncols() != k_pos.ncols() || q.ncols() != k_negs.ncols() {
        return Err(StylexError::Contract(format!(
            "InfoNCE shape mismatch: q {:?}, k_pos {:?}, k_negs {:?}",
            q.dim(),
            k_pos.dim(),
            k_negs.dim()
        )));
    }
    if n == 0 || k == 0 {
        return Err(StylexError::Contract(
            "InfoNCE needs at least one query and one negative".into(),
        ));
    }

    let l_pos = (&q * &k_pos).sum_axis(Axis(1)); // (N,)
    let l_neg = q.dot(&k_negs.t()); // (N, K)

    let mut loss = 0.0;
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk_pos = Array2::zeros(k_pos.raw_dim());
    let mut dk_negs = Array2::zeros(k_negs.raw_dim());
    let inv_tau = 1.0 / tau;
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        let lp = l_pos[i] * inv_tau;
        let row = l_neg.row(i);
        let mut m = lp;
        for &v in row.iter() {
            m = m.max(v * inv_tau);
        }
        // sum exp(v - m) excluding the max term itself, then ln_1p: keeps
        // the loss strictly positive even at sharp temperatures
        let mut rest = 0.0;
        let mut max_seen = false;
        let mut add = |v: f64| {
            if !max_seen && v == m {
                max_seen = true;
            } else {
                rest += (v - m).exp();
            }
        };
        add(lp);
        for &v in row.iter() {
            add(v * inv_tau);
        }
        let lse = m + rest.ln_1p();
        loss += lse - lp;

        // softmax probabilities over [pos, negs]
        let p_pos = (lp - lse).exp();
        let coeff_pos = (p_pos - 1.0) * inv_n * inv_tau;
        {
            let mut dqi = dq.row_mut(i);
            dqi.scaled_add(coeff_pos, &k_pos.row(i));
            let mut dkp = dk_pos.row_mut(i);
            dkp.scaled_add(coeff_pos, &q.row(i));
        }
        for j in 0..k {
            let p_j = (row[j] * inv_tau - lse).exp();
            let coeff = p_j * inv_n * inv_tau;
            let mut dqi = dq.row_mut(i);
            dqi.scaled_add(coeff, &k_negs.row(j));
            let mut dkn = dk_negs.row_mut(j);
            dkn.scaled_add(coeff, &q.row(i));
        }
    }

    Ok((loss * inv_n, InfoNceGrads { dq, dk_pos, dk_negs }))
}

/// KL(N(mu, sigma^2) || N(0, I)) = 1/2 Σ_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2),
/// averaged over the batch.
pub fn kld_standard_normal(mu: ArrayView2<f64>, logvar: ArrayView2<f64>) -> f64 {
    let n = mu.nrows().max(1) as f64;
    let mut total = 0.0;
    ndarray::Zip::from(&mu).and(&logvar).for_each(|&m, &lv| {
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    });
    total / n
}

/// Gradients of [`kld_standard_normal`] w.r.t. mu and logvar.
pub fn kld_grads(
    mu: ArrayView2<f64>,
    logvar: ArrayView2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = mu.nrows().max(1) as f64;
    let loss = kld_standard_normal(mu, logvar);
    let dmu = mu.mapv(|m| m / n);
    let dlogvar = logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) / n);
    (loss, dmu, dlogvar)
}

/// Sum of squared error per sample, averaged over the batch.
pub fn recon_loss(x_hat: &Array4<f64>, x: &Array4<f64>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(StylexError::Contract(format!(
            "reconstruction shape mismatch: {:?} vs {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    let n = x.dim().0.max(1) as f64;
    let mut total = 0.0;
    ndarray::Zip::from(x_hat).and(x).for_each(|&a, &b| {
        let d = a - b;
        total += d * d;
    });
    Ok(total / n)
}

/// Gradient of [`recon_loss`] w.r.t. x_hat.
pub fn recon_grad(x_hat: &Array4<f64>, x: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    let loss = recon_loss(x_hat, x)?;
    let n = x.dim().0.max(1) as f64;
    let mut d = x_hat.clone();
    ndarray::Zip::from(&mut d).and(x).for_each(|dv, &xv| {
        *dv = 2.0 * (*dv - xv) / n;
    });
    Ok((loss, d))
}

/// lambda_kl * KLD + lambda_recon * reconstruction.
pub fn cvae_loss(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    mu: ArrayView2<f64>,
    logvar: ArrayView2<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    let kld = kld_standard_normal(mu, logvar);
    let recon = recon_loss(x_hat, x)?;
    Ok(weights.lambda_kl * kld + weights.lambda_recon * recon)
}

/// Jensen–Shannon surrogate of the MI lower bound:
/// mean(-sp(-T_joint)) - mean(sp(T_marginal)). Bounded above by 0, and by
/// -2 log 2 when restricted to constant statistics.
pub fn mine_jsd(t_joint: ArrayView1<f64>, t_marginal: ArrayView1<f64>) -> Result<f64> {
    Ok(mine_jsd_grads(t_joint, t_marginal)?.0)
}

/// [`mine_jsd`] plus gradients w.r.t. both score batches.
pub fn mine_jsd_grads(
    t_joint: ArrayView1<f64>,
    t_marginal: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(StylexError::Contract(
            "mine_jsd requires non-empty score batches".into(),
        ));
    }
    if t_joint.len() != t_marginal.len() {
        return Err(StylexError::Contract(format!(
            "mine_jsd batch mismatch: {} joint vs {} marginal",
            t_joint.len(),
            t_marginal.len()
        )));
    }
    let n = t_joint.len() as f64;
    let joint_term: f64 = t_joint.iter().map(|&t| -softplus(-t)).sum::<f64>() / n;
    let marg_term: f64 = t_marginal.iter().map(|&t| softplus(t)).sum::<f64>() / n;
    // d(-sp(-t))/dt = sigmoid(-t); d(-sp(t))/dt = -sigmoid(t)
    let dt_joint = t_joint.mapv(|t| logistic(-t) / n);
    let dt_marginal = t_marginal.mapv(|t| -logistic(t) / n);
    Ok((joint_term - marg_term, dt_joint, dt_marginal))
}

/// Donsker–Varadhan bound mean(T_joint) - log mean(exp(T_marginal)),
/// stabilized by max subtraction. Diagnostics only; training uses the JSD
/// form.
pub fn mine_kl(t_joint: ArrayView1<f64>, t_marginal: ArrayView1<f64>) -> Result<f64> {
    Ok(mine_kl_grads(t_joint, t_marginal)?.0)
}

pub fn mine_kl_grads(
    t_joint: ArrayView1<f64>,
    t_marginal: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(StylexError::Contract(
            "mine_kl requires non-empty score batches".into(),
        ));
    }
    let n = t_joint.len() as f64;
    let m = t_marginal.len() as f64;
    let joint = t_joint.sum() / n;
    let max = t_marginal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = t_marginal.iter().map(|&t| (t - max).exp()).sum();
    let lme = max + (z / m).ln();
    let dt_joint = Array1::from_elem(t_joint.len(), 1.0 / n);
    // d lme / dt_i = softmax(t)_i
    let dt_marginal = t_marginal.mapv(|t| -((t - max).exp() / z));
    Ok((joint - lme, dt_joint, dt_marginal))
}

/// Eq-level composition: cvae_term + lambda_mine * mi_term.
pub fn combined_loss(cvae_term: f64, mi_term: f64, weights: &LossWeights) -> f64 {
    cvae_term + weights.lambda_mine * mi_term
}
