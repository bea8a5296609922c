//! Monte Carlo dropout posterior over a trained model.
//!
//! Draw `m` samples one mask set per network from its own ChaCha stream
//! (`seed`, stream `m`), so a draw does not depend on how locations are
//! chunked or on thread scheduling. A mask set is shared by every location
//! of its draw, which keeps each sampled surface spatially coherent.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DncError, Result};
use crate::model::{regression_mean, DncModel, ModelMasks};

pub const DEFAULT_DRAWS: usize = 200;
/// Standard-normal 97.5% quantile used for 95% intervals.
pub const Z_95: f64 = 1.96;
/// Locations processed together by [`predict`].
pub const PREDICT_CHUNK: usize = 4096;

/// `M x n x J` samples of the spatial effect `w(s) = Psi(s) h(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    draws: Array3<f64>,
}

impl PosteriorDraws {
    pub fn new(draws: Array3<f64>) -> Result<Self> {
        if draws.len_of(Axis(0)) == 0 {
            return Err(DncError::InvalidParameter("need at least one draw".into()));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(DncError::Numeric("posterior draw is not finite".into()));
        }
        Ok(Self { draws })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len_of(Axis(0))
    }

    pub fn n_locations(&self) -> usize {
        self.draws.len_of(Axis(1))
    }

    pub fn n_outcomes(&self) -> usize {
        self.draws.len_of(Axis(2))
    }

    pub fn draws(&self) -> ArrayView3<'_, f64> {
        self.draws.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.draws
    }
}

/// Masks of draw `m`.
pub fn draw_masks(model: &DncModel, seed: u64, m: usize) -> Result<ModelMasks> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    model.sample_masks(&mut rng)
}

/// `n_draws` dropout samples of `w` at every row of `locations` (`n x 2`).
pub fn draw_posterior(
    model: &DncModel,
    locations: ArrayView2<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if n_draws == 0 {
        return Err(DncError::InvalidParameter("need at least one draw".into()));
    }
    let surfaces = (0..n_draws)
        .into_par_iter()
        .map(|m| {
            let masks = draw_masks(model, seed, m)?;
            let thinned = model.apply_masks(&masks)?;
            Ok(thinned.latent_batch(locations, None)?.spatial_effect())
        })
        .collect::<Result<Vec<Array2<f64>>>>()?;
    let (n, j) = (locations.nrows(), model.n_outcomes());
    let mut draws = Array3::zeros((n_draws, n, j));
    for (m, w) in surfaces.into_iter().enumerate() {
        draws.index_axis_mut(Axis(0), m).assign(&w);
    }
    PosteriorDraws::new(draws)
}

/// Gaussian predictive summary at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mu_w: Array1<f64>,
    pub sigma_w: Array2<f64>,
    pub mu_y: Array1<f64>,
    pub sigma_y: Array2<f64>,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub rho: Array2<f64>,
}

/// Mean and `1/M` covariance of the rows of `w` (`M x J`).
///
/// Moments are taken about the first draw, so identical draws give a mean
/// equal to that draw and an exactly zero covariance.
pub fn draw_moments(w: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (m, j) = w.dim();
    if m < 2 {
        return Err(DncError::InvalidParameter(format!(
            "covariance needs at least 2 draws, got {m}"
        )));
    }
    let origin = w.row(0).to_owned();
    let dev = &w - &origin;
    let shift = dev.sum_axis(Axis(0)) / m as f64;
    let centred = &dev - &shift;
    let mut cov = Array2::zeros((j, j));
    for a in 0..j {
        for b in a..j {
            let v = centred.column(a).dot(&centred.column(b)) / m as f64;
            cov[[a, b]] = v;
            cov[[b, a]] = v;
        }
    }
    Ok((origin + shift, cov))
}

/// Correlation matrix of a covariance; the diagonal is exactly 1.
pub fn cross_correlation(sigma: ArrayView2<f64>) -> Result<Array2<f64>> {
    let j = sigma.nrows();
    if sigma.ncols() != j {
        return Err(DncError::Shape(format!("covariance is {:?}, not square", sigma.dim())));
    }
    for i in 0..j {
        let d = sigma[[i, i]];
        if !(d > 0.0) || !d.is_finite() {
            return Err(DncError::UndefinedCorrelation { index: i, value: d });
        }
    }
    Ok(Array2::from_shape_fn((j, j), |(a, b)| {
        if a == b {
            1.0
        } else {
            (sigma[[a, b]] / (sigma[[a, a]] * sigma[[b, b]]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// Outcome correlations implied by `Psi F Psi^T + sigma2 I`.
pub fn true_cross_correlation(
    psi: ArrayView2<f64>,
    factor_cov: ArrayView2<f64>,
    sigma2: f64,
) -> Result<Array2<f64>> {
    let j = psi.nrows();
    if psi.ncols() != j || factor_cov.dim() != (j, j) {
        return Err(DncError::Shape(format!(
            "loading is {:?}, factor covariance is {:?}",
            psi.dim(),
            factor_cov.dim()
        )));
    }
    if !(sigma2 >= 0.0) {
        return Err(DncError::InvalidParameter(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    let mut sigma = psi.dot(&factor_cov).dot(&psi.t());
    sigma.diag_mut().mapv_inplace(|v| v + sigma2);
    cross_correlation(sigma.view())
}

fn summarize_location(
    w: ArrayView2<f64>,
    fixed: ndarray::ArrayView1<f64>,
    sigma2: f64,
) -> Result<PredictiveSummary> {
    let (mu_w, sigma_w) = draw_moments(w)?;
    let mu_y = &fixed + &mu_w;
    let mut sigma_y = sigma_w.clone();
    sigma_y.diag_mut().mapv_inplace(|v| v + sigma2);
    let half: Array1<f64> = sigma_y.diag().mapv(|v| Z_95 * v.sqrt());
    let lower = &mu_y - &half;
    let upper = &mu_y + &half;
    let rho = cross_correlation(sigma_y.view())?;
    Ok(PredictiveSummary {
        mu_w,
        sigma_w,
        mu_y,
        sigma_y,
        lower,
        upper,
        rho,
    })
}

/// Per-location summaries; `designs` is `n x J x p`.
pub fn summarize(
    draws: &PosteriorDraws,
    model: &DncModel,
    designs: &Array3<f64>,
) -> Result<Vec<PredictiveSummary>> {
    let n = draws.n_locations();
    if designs.len_of(Axis(0)) != n || draws.n_outcomes() != model.n_outcomes() {
        return Err(DncError::Shape(format!(
            "{} locations with J = {} drawn, designs have {} rows, model J = {}",
            n,
            draws.n_outcomes(),
            designs.len_of(Axis(0)),
            model.n_outcomes()
        )));
    }
    let fixed = regression_mean(designs, model.beta())?;
    (0..n)
        .map(|i| {
            summarize_location(
                draws.draws.slice(s![.., i, ..]),
                fixed.row(i),
                model.sigma2(),
            )
        })
        .collect()
}

/// Column-oriented predictions for many locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub mu_y: Array2<f64>,
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    /// Strict upper triangle of the correlation matrix, row-major.
    pub rho: Array2<f64>,
}

impl PredictionTable {
    pub fn n(&self) -> usize {
        self.mu_y.nrows()
    }
}

/// Draws and summarizes in chunks of locations so memory stays linear in `n`.
pub fn predict(
    model: &DncModel,
    locations: ArrayView2<f64>,
    designs: &Array3<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<PredictionTable> {
    let n = locations.nrows();
    let j = model.n_outcomes();
    if designs.len_of(Axis(0)) != n {
        return Err(DncError::Shape(format!(
            "{n} locations but {} design rows",
            designs.len_of(Axis(0))
        )));
    }
    if n_draws < 2 {
        return Err(DncError::InvalidParameter(format!(
            "prediction needs at least 2 draws, got {n_draws}"
        )));
    }
    let pairs = j * (j - 1) / 2;
    let mut table = PredictionTable {
        mu_y: Array2::zeros((n, j)),
        lower: Array2::zeros((n, j)),
        upper: Array2::zeros((n, j)),
        rho: Array2::zeros((n, pairs)),
    };
    let thinned = (0..n_draws)
        .map(|m| model.apply_masks(&draw_masks(model, seed, m)?))
        .collect::<Result<Vec<DncModel>>>()?;
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let locs = locations.slice(s![start..end, ..]);
        let surfaces = thinned
            .par_iter()
            .map(|thinned| Ok(thinned.latent_batch(locs, None)?.spatial_effect()))
            .collect::<Result<Vec<Array2<f64>>>>()?;
        let mut draws = Array3::zeros((n_draws, end - start, j));
        for (m, w) in surfaces.into_iter().enumerate() {
            draws.index_axis_mut(Axis(0), m).assign(&w);
        }
        let draws = PosteriorDraws::new(draws)?;
        let chunk_designs = designs.slice(s![start..end, .., ..]).to_owned();
        for (k, summary) in summarize(&draws, model, &chunk_designs)?.into_iter().enumerate() {
            let i = start + k;
            table.mu_y.row_mut(i).assign(&summary.mu_y);
            table.lower.row_mut(i).assign(&summary.lower);
            table.upper.row_mut(i).assign(&summary.upper);
            let mut c = 0;
            for a in 0..j {
                for b in a + 1..j {
                    table.rho[[i, c]] = summary.rho[[a, b]];
                    c += 1;
                }
            }
        }
        start = end;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Regularization};
    use ndarray::array;
    use proptest::prelude::*;

    fn small_model(keep: f64, seed: u64) -> DncModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            factor_hidden: vec![8, 8],
            loading_hidden: vec![8],
        };
        let reg = Regularization {
            keep_prob_h: keep,
            keep_prob_psi: keep,
            ..Default::default()
        };
        let mut m = DncModel::new(2, 2, &arch, reg, &mut rng).unwrap();
        m.set_beta(array![0.5, -1.0]).unwrap();
        m.set_sigma2(0.3).unwrap();
        m
    }

    fn grid(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(i, c)| {
            let t = i as f64 / n as f64;
            if c == 0 {
                t
            } else {
                (7.0 * t).fract()
            }
        })
    }

    #[test]
    fn two_draw_moments() {
        let w = array![[1.0, 1.0], [3.0, 3.0]];
        let (mu, cov) = draw_moments(w.view()).unwrap();
        assert_eq!(mu, array![2.0, 2.0]);
        assert_eq!(cov, array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(draw_moments(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn identical_draws_have_zero_covariance() {
        let w = Array2::from_shape_fn((7, 2), |(_, c)| 0.1 + c as f64 * 0.7);
        let (mu, cov) = draw_moments(w.view()).unwrap();
        assert_eq!(mu, array![0.1, 0.1 + 0.7]);
        assert!(cov.iter().all(|&v| v == 0.0));
        let s = summarize_location(w.view(), array![0.0, 0.0].view(), 0.25).unwrap();
        assert_eq!(s.sigma_y, array![[0.25, 0.0], [0.0, 0.25]]);
        assert_eq!(s.mu_y, s.mu_w);
    }

    #[test]
    fn correlation_examples() {
        let eye = Array2::<f64>::eye(3);
        assert_eq!(cross_correlation(eye.view()).unwrap(), eye);
        let r = cross_correlation(array![[2.0, 1.0], [1.0, 2.0]].view()).unwrap();
        assert_eq!(r[[0, 1]], 0.5);
        let r = cross_correlation(array![[4.0, 2.0], [2.0, 1.0]].view()).unwrap();
        assert_eq!(r[[0, 1]], 1.0);
        let err = cross_correlation(array![[1.0, 0.0], [0.0, 0.0]].view()).unwrap_err();
        assert!(matches!(err, DncError::UndefinedCorrelation { index: 1, .. }));
    }

    #[test]
    fn true_correlation_examples() {
        let eye = Array2::<f64>::eye(2);
        assert_eq!(true_cross_correlation(eye.view(), eye.view(), 0.0).unwrap(), eye);
        let psi = array![[1.0, 1.0], [0.0, 1.0]];
        let r = true_cross_correlation(psi.view(), eye.view(), 0.0).unwrap();
        assert!((r[[0, 1]] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((r[[0, 1]] - 0.7071).abs() < 1e-4);
        let r = true_cross_correlation(psi.view(), eye.view(), 1e12).unwrap();
        assert!(r[[0, 1]].abs() < 1e-11);
        assert!(true_cross_correlation(psi.view(), Array2::eye(3).view(), 0.0).is_err());
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let model = small_model(0.8, 1);
        let locs = grid(30);
        let a = draw_posterior(&model, locs.view(), 20, 5).unwrap();
        let b = draw_posterior(&model, locs.view(), 20, 5).unwrap();
        assert_eq!(a, b);
        let c = draw_posterior(&model, locs.view(), 20, 6).unwrap();
        assert_ne!(a, c);
        assert!(draw_posterior(&model, locs.view(), 0, 5).is_err());
    }

    #[test]
    fn draws_do_not_depend_on_location_subset() {
        let model = small_model(0.7, 2);
        let locs = grid(12);
        let all = draw_posterior(&model, locs.view(), 9, 3).unwrap();
        let tail = draw_posterior(&model, locs.slice(s![5.., ..]), 9, 3).unwrap();
        assert_eq!(all.draws().slice(s![.., 5.., ..]), tail.draws());
    }

    #[test]
    fn full_keep_gives_deterministic_surface() {
        let model = small_model(1.0, 3);
        let locs = grid(25);
        let det = model.latent_batch(locs.view(), None).unwrap().spatial_effect();
        let draws = draw_posterior(&model, locs.view(), 10, 4).unwrap();
        for m in 0..10 {
            assert_eq!(draws.draws().index_axis(Axis(0), m), det);
        }
    }

    #[test]
    fn chunked_prediction_matches_summaries() {
        let model = small_model(0.8, 4);
        let locs = grid(40);
        let x = Array3::from_shape_fn((40, 2, 2), |(i, a, b)| {
            if a == b {
                (i as f64 * 0.37).sin()
            } else {
                0.0
            }
        });
        let table = predict(&model, locs.view(), &x, 16, 11).unwrap();
        let draws = draw_posterior(&model, locs.view(), 16, 11).unwrap();
        let sums = summarize(&draws, &model, &x).unwrap();
        for (i, s) in sums.iter().enumerate() {
            assert_eq!(table.mu_y.row(i), s.mu_y);
            assert_eq!(table.lower.row(i), s.lower);
            assert_eq!(table.upper.row(i), s.upper);
            assert_eq!(table.rho[[i, 0]], s.rho[[0, 1]]);
            assert_eq!(s.sigma_y[[0, 0]], s.sigma_w[[0, 0]] + model.sigma2());
            assert_eq!(s.sigma_y[[0, 1]], s.sigma_w[[0, 1]]);
        }
        assert!(predict(&model, locs.view(), &x, 1, 11).is_err());
    }

    #[test]
    fn summaries_are_psd_with_valid_correlations() {
        let model = small_model(0.6, 5);
        let locs = grid(20);
        let draws = draw_posterior(&model, locs.view(), 50, 1).unwrap();
        let x = Array3::zeros((20, 2, 2));
        for s in summarize(&draws, &model, &x).unwrap() {
            let m = nalgebra::DMatrix::from_row_iterator(2, 2, s.sigma_w.iter().copied());
            let eig = m.symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&e| e >= -1e-10));
            assert_eq!(s.sigma_w[[0, 1]], s.sigma_w[[1, 0]]);
            assert_eq!(s.rho[[0, 0]], 1.0);
            assert!(s.rho[[0, 1]].abs() <= 1.0);
            assert!(s.lower.iter().zip(&s.upper).all(|(l, u)| l < u));
            // beta is irrelevant when X = 0
            assert_eq!(s.mu_y, s.mu_w);
        }
    }

    #[test]
    fn monte_carlo_mean_converges() {
        let model = small_model(0.8, 6);
        let locs = grid(15);
        let m = 200;
        let a = draw_posterior(&model, locs.view(), m, 100).unwrap();
        let b = draw_posterior(&model, locs.view(), 4 * m, 200).unwrap();
        for i in 0..15 {
            let (ma, ca) = draw_moments(a.draws().slice(s![.., i, ..])).unwrap();
            let (mb, cb) = draw_moments(b.draws().slice(s![.., i, ..])).unwrap();
            for j in 0..2 {
                let pooled = (0.5 * (ca[[j, j]] + cb[[j, j]])).sqrt();
                let diff = (ma[j] - mb[j]).abs();
                assert!(diff < 5.0 * pooled / (m as f64).sqrt() + 1e-12, "loc {i} outcome {j}");
            }
        }
    }

    proptest! {
        #[test]
        fn correlation_ignores_diagonal_rescaling(
            a in prop::collection::vec(-2.0f64..2.0, 9),
            d in prop::collection::vec(0.1f64..10.0, 3),
        ) {
            let l = Array2::from_shape_vec((3, 3), a).unwrap();
            let mut sigma = l.dot(&l.t());
            sigma.diag_mut().mapv_inplace(|v| v + 0.1);
            let base = cross_correlation(sigma.view()).unwrap();
            let scaled = Array2::from_shape_fn((3, 3), |(i, j)| d[i] * sigma[[i, j]] * d[j]);
            let r = cross_correlation(scaled.view()).unwrap();
            for (x, y) in base.iter().zip(&r) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn summary_ignores_draw_order(
            vals in prop::collection::vec(-5.0f64..5.0, 4..30),
            rot in 0usize..30,
        ) {
            let m = vals.len() / 2;
            let w = Array2::from_shape_vec((m, 2), vals[..2 * m].to_vec()).unwrap();
            let k = rot % m;
            let order: Vec<usize> = (0..m).map(|i| (i + k) % m).rev().collect();
            let p = w.select(Axis(0), &order);
            let (mu1, c1) = draw_moments(w.view()).unwrap();
            let (mu2, c2) = draw_moments(p.view()).unwrap();
            for (x, y) in mu1.iter().zip(&mu2).chain(c1.iter().zip(&c2)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
