//! Fitting: dropout mini-batch optimisation of the networks, interleaved
//! with closed-form refreshes of `beta` and `sigma2`, and early stopping on
//! validation RMSPE.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};
use crate::metrics::rmspe_per_outcome;
use crate::model::{CoordinateScaler, DncModel, ModelGradients, ModelMasks, Regularization, SpatialDataset};

/// Floor applied to the noise-variance estimate.
pub const SIGMA2_FLOOR: f64 = 1e-8;
/// Ridge added to singular normal equations for `beta`.
pub const BETA_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Denominator of the noise-variance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseNormalization {
    /// `sum_i ||r_i||^2 / (n J)`: variance of one scalar residual.
    PerComponent,
    /// `sum_i ||r_i||^2 / n`: squared residual norm per location.
    PerLocation,
}

/// How the networks are evaluated for the per-epoch `beta`, `sigma2` and
/// validation updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// All units on, no rescaling.
    MaskFree,
    /// Hidden activations multiplied by the keep probability.
    WeightScaled,
}

impl Evaluation {
    pub fn network(self, model: &DncModel) -> Result<DncModel> {
        match self {
            Evaluation::MaskFree => Ok(model.clone()),
            Evaluation::WeightScaled => model.weight_scaled(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub keep_prob_h: f64,
    pub keep_prob_psi: f64,
    pub lambda_w: f64,
    pub lambda_b: f64,
    pub noise_normalization: NoiseNormalization,
    pub evaluation: Evaluation,
    /// Map training locations onto `[-1, 1]^2` before they reach the networks.
    pub scale_coordinates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 64,
            max_epochs: 1000,
            patience: 50,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            keep_prob_h: 0.8,
            keep_prob_psi: 0.8,
            lambda_w: 1e-4,
            lambda_b: 1e-4,
            noise_normalization: NoiseNormalization::PerComponent,
            evaluation: Evaluation::WeightScaled,
            scale_coordinates: true,
        }
    }
}

impl TrainConfig {
    /// Settings used for the stationary simulation design: lighter dropout
    /// and weight decay than the defaults, both inside the usual ranges
    /// (drop rate 0.1 to 0.3, penalty 1e-5 to 1e-4), and longer patience.
    pub fn stationary() -> Self {
        Self {
            keep_prob_h: 0.9,
            keep_prob_psi: 0.9,
            lambda_w: 1e-5,
            lambda_b: 1e-5,
            patience: 100,
            ..Self::default()
        }
    }

    /// Settings used for the deep-GP simulation design.
    pub fn deepgp() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 2000,
            ..Self::default()
        }
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            keep_prob_h: self.keep_prob_h,
            keep_prob_psi: self.keep_prob_psi,
            lambda_w: self.lambda_w,
            lambda_b: self.lambda_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DncError::InvalidParameter(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, max epochs and patience must be positive".into());
        }
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.adam_beta1) || !in_unit(self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad(format!(
                "Adam parameters out of range: beta1 {}, beta2 {}, eps {}",
                self.adam_beta1, self.adam_beta2, self.adam_eps
            ));
        }
        self.regularization().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation RMSPE averaged over outcomes, per epoch.
    pub val_rmspe: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// First-order optimiser state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        let moments = if cfg.optimizer == OptimizerKind::Adam {
            n_params
        } else {
            0
        };
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// One update of `params` against `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_slices(std::iter::once(params), std::iter::once(grads))
    }

    /// One update over a sequence of parameter slices that together form the
    /// flat parameter vector.
    pub fn step_slices<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut [f64]>,
        grads: impl Iterator<Item = &'b [f64]>,
    ) -> Result<()> {
        self.t += 1;
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(self.t);
        let bias2 = 1.0 - b2.powi(self.t);
        let mut offset = 0;
        let mut grads = grads;
        for p in params {
            let g = grads
                .next()
                .ok_or_else(|| DncError::Shape("fewer gradient slices than parameters".into()))?;
            if g.len() != p.len() {
                return Err(DncError::Shape(format!(
                    "gradient slice has {} entries, parameter slice {}",
                    g.len(),
                    p.len()
                )));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(DncError::Numeric("gradient is not finite".into()));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.iter_mut().zip(g) {
                        *x = flush_tiny(*x - lr * gi);
                    }
                }
                OptimizerKind::Adam => {
                    if offset + p.len() > self.m.len() {
                        return Err(DncError::Shape("more parameters than optimiser state".into()));
                    }
                    let m = &mut self.m[offset..offset + p.len()];
                    let v = &mut self.v[offset..offset + p.len()];
                    for k in 0..p.len() {
                        let gk = flush_tiny(g[k]);
                        m[k] = flush_tiny(b1 * m[k] + (1.0 - b1) * gk);
                        v[k] = flush_tiny(b2 * v[k] + (1.0 - b2) * gk * gk);
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        p[k] = flush_tiny(p[k] - lr * m_hat / (v_hat.sqrt() + eps));
                    }
                }
            }
            offset += p.len();
        }
        if grads.next().is_some() {
            return Err(DncError::Shape("more gradient slices than parameters".into()));
        }
        if self.kind == OptimizerKind::Adam && offset != self.m.len() {
            return Err(DncError::Shape(format!(
                "optimiser tracks {} parameters, got {offset}",
                self.m.len()
            )));
        }
        Ok(())
    }

    pub fn step_model(&mut self, model: &mut DncModel, grads: &ModelGradients) -> Result<()> {
        self.step_slices(model.param_slices_mut(), grads.slices())
    }
}

/// Least-squares `beta` given the current spatial effect:
/// `argmin_beta sum_i ||y_i - X_i beta - Psi_i h_i||^2`.
pub fn update_beta(
    model: &DncModel,
    data: &SpatialDataset,
    masks: Option<&ModelMasks>,
) -> Result<Array1<f64>> {
    if data.n_outcomes() != model.n_outcomes() || data.n_covariates() != model.n_covariates() {
        return Err(DncError::Shape("dataset does not match model dimensions".into()));
    }
    let w = model
        .latent_batch(data.locations().view(), masks)?
        .spatial_effect();
    let target = data.outcomes() - &w;
    let p = model.n_covariates();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..data.n() {
        let x = data.design(i);
        for a in 0..p {
            for b in 0..p {
                gram[(a, b)] += x.column(a).dot(&x.column(b));
            }
            rhs[a] += x.column(a).dot(&target.row(i));
        }
    }
    let solution = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            warn!("normal equations for beta are singular; adding ridge {BETA_RIDGE:e}");
            let ridged = gram + DMatrix::identity(p, p) * BETA_RIDGE;
            ridged
                .cholesky()
                .ok_or_else(|| DncError::Numeric("beta normal equations are not solvable".into()))?
                .solve(&rhs)
        }
    };
    Ok(Array1::from_iter(solution.iter().copied()))
}

/// Noise variance from the deterministic residuals, floored at [`SIGMA2_FLOOR`].
pub fn update_sigma2(
    model: &DncModel,
    data: &SpatialDataset,
    normalization: NoiseNormalization,
) -> Result<f64> {
    let r = model.residual_matrix(data)?;
    let sq: f64 = r.iter().map(|v| v * v).sum();
    let denom = match normalization {
        NoiseNormalization::PerComponent => (data.n() * data.n_outcomes()) as f64,
        NoiseNormalization::PerLocation => data.n() as f64,
    };
    Ok((sq / denom).max(SIGMA2_FLOOR))
}

/// Validation RMSPE averaged over outcomes, deterministic predictions.
pub fn validation_rmspe(model: &DncModel, data: &SpatialDataset) -> Result<f64> {
    let pred = model.predict_dataset(data, None)?;
    let per = rmspe_per_outcome(data.outcomes().view(), pred.view())?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Re-solves `beta` and `sigma2` on `data` with the networks evaluated as
/// `cfg.evaluation` says; returns that evaluation copy with the new values.
fn refresh_beta_sigma2(
    model: &mut DncModel,
    data: &SpatialDataset,
    cfg: &TrainConfig,
) -> Result<DncModel> {
    let mut eval = cfg.evaluation.network(model)?;
    let beta = update_beta(&eval, data, None)?;
    eval.set_beta(beta.clone())?;
    let sigma2 = update_sigma2(&eval, data, cfg.noise_normalization)?;
    eval.set_sigma2(sigma2)?;
    model.set_beta(beta)?;
    model.set_sigma2(sigma2)?;
    Ok(eval)
}

/// Fits `model` to `train`, early-stopping on `val`.
///
/// Each epoch shuffles the training records, draws one fresh mask set per
/// mini-batch and takes one optimiser step per batch; afterwards `beta` and
/// `sigma2` are re-solved on the full training set. The returned model is the
/// snapshot from the epoch with the lowest validation RMSPE.
pub fn fit(
    model: DncModel,
    train: &SpatialDataset,
    val: &SpatialDataset,
    cfg: &TrainConfig,
) -> Result<(DncModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = model;
    for data in [train, val] {
        if data.n_outcomes() != model.n_outcomes() || data.n_covariates() != model.n_covariates()
        {
            return Err(DncError::Shape(format!(
                "dataset has J = {}, p = {}; model has J = {}, p = {}",
                data.n_outcomes(),
                data.n_covariates(),
                model.n_outcomes(),
                model.n_covariates()
            )));
        }
    }
    model.set_regularization(cfg.regularization())?;
    if cfg.scale_coordinates {
        model.set_scaler(CoordinateScaler::fit(train.locations().view())?)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    refresh_beta_sigma2(&mut model, train, cfg)?;

    let mut opt = Optimizer::new(cfg, model.n_params());
    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut train_loss = Vec::new();
    let mut val_rmspe = Vec::new();
    let mut best: Option<(f64, usize, DncModel)> = None;
    let mut stale = 0;
    let diverged = |epoch| DncError::Diverged {
        epoch,
        learning_rate: cfg.learning_rate,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk)?;
            let masks = model.sample_masks(&mut rng)?;
            let (loss, grads) = model.loss_and_gradient(&batch, Some(&masks))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch));
            }
            opt.step_model(&mut model, &grads)?;
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / train.n() as f64;

        let score = refresh_beta_sigma2(&mut model, train, cfg)
            .and_then(|eval| validation_rmspe(&eval, val))
            .map_err(|_| diverged(epoch))?;
        let sigma2 = model.sigma2();
        if !score.is_finite() || !epoch_loss.is_finite() {
            return Err(diverged(epoch));
        }
        train_loss.push(epoch_loss);
        val_rmspe.push(score);
        debug!("epoch {epoch}: loss {epoch_loss:.6}, val rmspe {score:.6}, sigma2 {sigma2:.6}");

        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch runs");
    let report = TrainReport {
        epochs_run: train_loss.len(),
        train_loss,
        val_rmspe,
        best_epoch,
        beta: best_model.beta().to_vec(),
        sigma2: best_model.sigma2(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}

/// Weights of dead units decay geometrically under the penalty and their
/// gradients follow; left alone they reach the subnormal range, where every
/// multiply is many times slower. Anything this small is zero for training.
fn flush_tiny(x: f64) -> f64 {
    if x.abs() < 1e-150 {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use ndarray::{array, Array2, Array3};

    fn sgd(lr: f64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: lr,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(&sgd(0.1), 1);
        let mut theta = [1.0];
        opt.step(&mut theta, &[2.0]).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_with_zero_gradient_is_stationary() {
        let mut opt = Optimizer::new(&TrainConfig::default(), 3);
        let mut theta = [1.0, -2.0, 0.5];
        for _ in 0..10 {
            opt.step(&mut theta, &[0.0; 3]).unwrap();
        }
        assert_eq!(theta, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_state_never_goes_subnormal() {
        let mut opt = Optimizer::new(&TrainConfig::default(), 2);
        let mut theta = [1e-149, 0.3];
        opt.step(&mut theta, &[1e-200, 1e-3]).unwrap();
        for _ in 0..20_000 {
            opt.step(&mut theta, &[0.0, 0.0]).unwrap();
        }
        for x in opt.m.iter().chain(&opt.v).chain(&theta) {
            assert!(*x == 0.0 || x.is_normal(), "{x:e}");
        }
        assert_eq!(opt.m, [0.0, 0.0]);
    }

    #[test]
    fn adam_matches_hand_stepped_recurrences() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&cfg, 1);
        let mut theta = [0.0];
        // reference: m_t = 0.9 m + 0.1 g, v_t = 0.999 v + 0.001 g^2, g = 1
        let (mut m, mut v, mut expect) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expect -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            opt.step(&mut theta, &[1.0]).unwrap();
        }
        assert!((theta[0] - expect).abs() < 1e-15);
        // with a constant gradient the bias-corrected step is lr * 1/(1+eps)
        assert!((theta[0] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn optimizer_rejects_bad_gradients() {
        let mut opt = Optimizer::new(&TrainConfig::default(), 2);
        let mut theta = [0.0, 0.0];
        assert!(matches!(opt.step(&mut theta, &[1.0]), Err(DncError::Shape(_))));
        assert!(matches!(
            opt.step(&mut theta, &[f64::NAN, 0.0]),
            Err(DncError::Numeric(_))
        ));
    }

    fn zero_w_model(p: usize) -> DncModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = Architecture {
            factor_hidden: vec![3],
            loading_hidden: vec![3],
        };
        let mut m = DncModel::new(2, p, &arch, Regularization::default(), &mut rng).unwrap();
        for o in 0..3 {
            let net = m.loading_net_mut(o);
            let zero = vec![0.0; net.n_params()];
            net.set_flat(&zero).unwrap();
        }
        m
    }

    fn random_data(seed: u64, n: usize, p: usize) -> SpatialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        SpatialDataset::new(
            Array2::from_shape_fn((n, 2), |_| rng.random::<f64>()),
            Array3::from_shape_fn((n, 2, p), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0)),
        )
        .unwrap()
    }

    #[test]
    fn beta_matches_normal_equations_when_w_is_zero() {
        let model = zero_w_model(3);
        let data = random_data(1, 40, 3);
        let beta = update_beta(&model, &data, None).unwrap();
        // independent oracle: stack all rows, solve (X'X) b = X'y by Gaussian elimination
        let mut a = [[0.0f64; 4]; 3];
        for i in 0..40 {
            for j in 0..2 {
                for r in 0..3 {
                    for c in 0..3 {
                        a[r][c] += data.designs()[[i, j, r]] * data.designs()[[i, j, c]];
                    }
                    a[r][3] += data.designs()[[i, j, r]] * data.outcomes()[[i, j]];
                }
            }
        }
        for col in 0..3 {
            let piv = a[col][col];
            for c in col..4 {
                a[col][c] /= piv;
            }
            for r in 0..3 {
                if r != col {
                    let f = a[r][col];
                    for c in col..4 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        for k in 0..3 {
            assert!((beta[k] - a[k][3]).abs() < 1e-10, "{} vs {}", beta[k], a[k][3]);
        }
    }

    #[test]
    fn beta_exact_recovery_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture {
            factor_hidden: vec![4],
            loading_hidden: vec![4],
        };
        let model = DncModel::new(2, 2, &arch, Regularization::default(), &mut rng).unwrap();
        let base = random_data(3, 30, 2);
        let w: Array2<f64> = model
            .latent_batch(base.locations().view(), None)
            .unwrap()
            .spatial_effect();
        let beta_star = array![0.7, -1.3];
        let y = crate::model::regression_mean(base.designs(), &beta_star).unwrap() + &w;
        let exact =
            SpatialDataset::new(base.locations().clone(), base.designs().clone(), y).unwrap();
        let beta = update_beta(&model, &exact, None).unwrap();
        assert!((&beta - &beta_star).iter().all(|d| d.abs() < 1e-10));

        // gradient of the data-fit term in beta vanishes on noisy data
        let beta = update_beta(&model, &base, None).unwrap();
        let mut m2 = model.clone();
        m2.set_beta(beta).unwrap();
        let r = m2.residual_matrix(&base).unwrap();
        let mut grad = [0.0; 2];
        let mut scale = 0.0;
        for i in 0..30 {
            for k in 0..2 {
                for j in 0..2 {
                    grad[k] += base.designs()[[i, j, k]] * r[[i, j]];
                    scale += (base.designs()[[i, j, k]] * r[[i, j]]).abs();
                }
            }
        }
        assert!(grad.iter().all(|g| g.abs() <= 1e-6 * scale));
    }

    #[test]
    fn intercept_beta_is_mean_residual() {
        let model = zero_w_model(1);
        let data = random_data(5, 25, 1);
        let ones = Array3::from_elem((25, 2, 1), 1.0);
        let data = SpatialDataset::new(data.locations().clone(), ones, data.outcomes().clone())
            .unwrap();
        let beta = update_beta(&model, &data, None).unwrap();
        let w = model.latent_batch(data.locations().view(), None).unwrap().spatial_effect();
        let mean = (data.outcomes() - &w).mean().unwrap();
        assert!((beta[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn singular_design_falls_back_to_ridge() {
        let model = zero_w_model(2);
        let data = random_data(6, 10, 2);
        let mut designs = data.designs().clone();
        designs.index_axis_mut(ndarray::Axis(2), 1).fill(0.0);
        let data = SpatialDataset::new(data.locations().clone(), designs, data.outcomes().clone())
            .unwrap();
        let beta = update_beta(&model, &data, None).unwrap();
        assert!(beta.iter().all(|b| b.is_finite()));
        assert_eq!(beta[1], 0.0);
    }

    fn residual_fixture(rows: &[[f64; 2]]) -> (DncModel, SpatialDataset) {
        let model = zero_w_model(1);
        let n = rows.len();
        let mut y = Array2::zeros((n, 2));
        for (i, r) in rows.iter().enumerate() {
            y[[i, 0]] = r[0];
            y[[i, 1]] = r[1];
        }
        // zero loadings and zero designs: residuals equal y exactly
        let data = SpatialDataset::new(Array2::zeros((n, 2)), Array3::zeros((n, 2, 1)), y).unwrap();
        (model, data)
    }

    #[test]
    fn sigma2_examples() {
        let (model, data) = residual_fixture(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(update_sigma2(&model, &data, NoiseNormalization::PerLocation).unwrap(), 1.0);
        assert_eq!(update_sigma2(&model, &data, NoiseNormalization::PerComponent).unwrap(), 0.5);

        let (model, data) = residual_fixture(&[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(
            update_sigma2(&model, &data, NoiseNormalization::PerLocation).unwrap(),
            SIGMA2_FLOOR
        );

        let (model, data) = residual_fixture(&[[1.0, -2.0], [0.5, 3.0], [-1.0, 0.25]]);
        let (_, scaled) = residual_fixture(&[[3.0, -6.0], [1.5, 9.0], [-3.0, 0.75]]);
        let a = update_sigma2(&model, &data, NoiseNormalization::PerLocation).unwrap();
        let b = update_sigma2(&model, &scaled, NoiseNormalization::PerLocation).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12);
        let r = model.residual_matrix(&data).unwrap();
        let independent: f64 =
            r.rows().into_iter().map(|row| row.dot(&row)).sum::<f64>() / 3.0;
        assert!((a - independent).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.adam_beta2 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.keep_prob_h = 0.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::deepgp().validate().is_ok());
    }
}
