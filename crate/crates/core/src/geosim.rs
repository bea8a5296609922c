//! Synthetic multivariate spatial data.
//!
//! Exact Gaussian-process draws come from a dense Cholesky factor of the
//! jittered Gram matrix, which is fine at a few thousand locations. Two
//! bivariate designs are provided:
//!
//! * `stationary`: exponential-kernel factors and loadings with unit-offset
//!   diagonal entries `1 + eta_11`, `1 + eta_22` and one mean-zero
//!   off-diagonal entry (lower by default, `psi_21 = eta_21`), one
//!   standard-normal covariate per outcome.
//! * `deepgp`: Matérn-3/2 factors, loadings drawn as a GP over a 5-D latent
//!   warping of space that is itself a GP, one covariate shared by both outcomes.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};
use crate::model::{DesignLayout, SpatialDataset};
use crate::posterior::true_cross_correlation;

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Exponential,
    Matern32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub variance: f64,
    pub length_scale: f64,
}

impl Kernel {
    pub fn new(family: KernelFamily, variance: f64, length_scale: f64) -> Result<Self> {
        if !(variance > 0.0 && length_scale > 0.0) || !variance.is_finite() || !length_scale.is_finite()
        {
            return Err(DncError::InvalidParameter(format!(
                "kernel variance and length scale must be positive, got {variance} and {length_scale}"
            )));
        }
        Ok(Self {
            family,
            variance,
            length_scale,
        })
    }

    pub fn exponential(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, 1.0, length_scale)
    }

    pub fn matern32(variance: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern32, variance, length_scale)
    }

    /// Covariance as a function of Euclidean distance.
    pub fn at_distance(&self, d: f64) -> f64 {
        let r = d / self.length_scale;
        match self.family {
            KernelFamily::Exponential => self.variance * (-r).exp(),
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * r;
                self.variance * (1.0 + a) * (-a).exp()
            }
        }
    }

    /// Covariance between two points of any (equal) dimension.
    pub fn eval(&self, s: ArrayView1<f64>, t: ArrayView1<f64>) -> f64 {
        let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        self.at_distance(d2.sqrt())
    }

    /// Gram matrix over the rows of `points`.
    pub fn gram(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let n = points.nrows();
        let mut k = Array2::zeros((n, n));
        for i in 0..n {
            k[[i, i]] = self.variance;
            for j in 0..i {
                let v = self.eval(points.row(i), points.row(j));
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        k
    }
}

/// Lower Cholesky factor of a jittered Gram matrix, reusable across draws.
#[derive(Debug, Clone)]
pub struct GpSampler {
    lower: DMatrix<f64>,
    jitter: f64,
}

impl GpSampler {
    /// Factorises `K + jitter I`, doubling the jitter up to [`MAX_JITTER`] on failure.
    pub fn new(kernel: &Kernel, points: ArrayView2<f64>, jitter: f64) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(DncError::EmptyData);
        }
        if !(jitter >= 0.0) {
            return Err(DncError::InvalidParameter(format!("jitter must be >= 0, got {jitter}")));
        }
        let gram = kernel.gram(points);
        let base = DMatrix::from_row_iterator(n, n, gram.iter().copied());
        let mut current = jitter;
        loop {
            let mut m = base.clone();
            for i in 0..n {
                m[(i, i)] += current;
            }
            if let Some(ch) = m.cholesky() {
                return Ok(Self {
                    lower: ch.unpack(),
                    jitter: current,
                });
            }
            let next = if current == 0.0 { DEFAULT_JITTER } else { current * 2.0 };
            if next > MAX_JITTER {
                return Err(DncError::NotPositiveDefinite { jitter: current });
            }
            log::debug!("Cholesky failed with jitter {current:e}; retrying with {next:e}");
            current = next;
        }
    }

    pub fn n(&self) -> usize {
        self.lower.nrows()
    }

    /// Jitter that made the factorisation succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(i, j)| self.lower[(i, j)])
    }

    /// One draw `L xi` with `xi` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let n = self.n();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for (k, &x) in xi.iter().enumerate().take(i + 1) {
                acc += self.lower[(i, k)] * x;
            }
            out[i] = acc;
        }
        out
    }
}

/// One exact GP draw at the rows of `points`.
pub fn gp_sample<R: Rng + ?Sized>(
    kernel: &Kernel,
    points: ArrayView2<f64>,
    jitter: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    Ok(GpSampler::new(kernel, points, jitter)?.sample(rng))
}

/// Approximate GP draws from random Fourier features, `O(n D)` time and
/// `O(n)` memory for `D` features.
///
/// Each draw uses fresh frequencies `omega` from the kernel's spectral
/// density (a bivariate Student-t with `2 nu` degrees of freedom and scale
/// `1 / length_scale` for smoothness `nu`) and fresh phases, so the
/// covariance across draws equals the kernel exactly; single draws are
/// Gaussian only as `D` grows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierSampler {
    kernel: Kernel,
    n_features: usize,
}

impl FourierSampler {
    pub fn new(kernel: Kernel, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(DncError::InvalidParameter("need at least one Fourier feature".into()));
        }
        Ok(Self { kernel, n_features })
    }

    fn spectral_dof(&self) -> f64 {
        match self.kernel.family {
            KernelFamily::Exponential => 1.0,
            KernelFamily::Matern32 => 3.0,
        }
    }

    /// One draw at the rows of `points` (any dimension).
    pub fn sample<R: Rng + ?Sized>(&self, points: ArrayView2<f64>, rng: &mut R) -> Result<Array1<f64>> {
        let dim = points.ncols();
        let dof = self.spectral_dof();
        let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
        let d = self.n_features;
        let mut omega = Array2::zeros((d, dim));
        let mut phase = Array1::zeros(d);
        let mut weight = Array1::zeros(d);
        for k in 0..d {
            let scale = (dof / rng.sample(chi)).sqrt() / self.kernel.length_scale;
            for c in 0..dim {
                omega[[k, c]] = rng.sample::<f64, _>(StandardNormal) * scale;
            }
            phase[k] = rng.random::<f64>() * std::f64::consts::TAU;
            weight[k] = rng.sample::<f64, _>(StandardNormal);
        }
        let amp = (2.0 * self.kernel.variance / d as f64).sqrt();
        let out = Array1::from_iter(points.rows().into_iter().map(|s| {
            let mut acc = 0.0;
            for k in 0..d {
                acc += weight[k] * (omega.row(k).dot(&s) + phase[k]).cos();
            }
            amp * acc
        }));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 60/20/20 split; 1500/500/500 for n = 2500.
    pub fn proportional(n: usize) -> Self {
        let train = n * 3 / 5;
        let val = n / 5;
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Which off-diagonal entry of the true 2 x 2 loading matrix is non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Triangle {
    /// `psi_12` free, `psi_21 = 0`.
    Upper,
    /// `psi_21` free, `psi_12 = 0`.
    Lower,
}

impl Triangle {
    /// Row-major index of the free off-diagonal entry.
    fn off_diagonal(self) -> usize {
        match self {
            Triangle::Upper => 1,
            Triangle::Lower => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Stationary,
    Deepgp,
}

impl std::str::FromStr for Design {
    type Err = DncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Design::Stationary),
            "deepgp" => Ok(Design::Deepgp),
            other => Err(DncError::InvalidParameter(format!(
                "unknown design '{other}' (expected stationary or deepgp)"
            ))),
        }
    }
}

/// Generator settings, echoed into the simulation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub design: Design,
    pub n: usize,
    pub split: SplitSizes,
    pub seed: u64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub design_layout: DesignLayout,
    pub loading_triangle: Triangle,
    pub factor_kernel: Kernel,
    pub loading_kernel: Kernel,
    /// Kernel of the latent warping layer (deep-GP design only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_kernel: Option<Kernel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
}

impl SimParams {
    pub fn stationary(n: usize, seed: u64) -> Self {
        Self {
            design: Design::Stationary,
            n,
            split: SplitSizes::proportional(n),
            seed,
            beta: vec![1.0, 1.0],
            sigma2: 0.5,
            design_layout: DesignLayout::PerOutcome,
            loading_triangle: Triangle::Lower,
            factor_kernel: Kernel::exponential(0.5).expect("valid"),
            loading_kernel: Kernel::exponential(0.5).expect("valid"),
            latent_kernel: None,
            latent_dim: None,
        }
    }

    pub fn deepgp(n: usize, seed: u64) -> Self {
        Self {
            design: Design::Deepgp,
            n,
            split: SplitSizes::proportional(n),
            seed,
            beta: vec![0.25],
            sigma2: 0.01,
            design_layout: DesignLayout::Shared,
            loading_triangle: Triangle::Upper,
            factor_kernel: Kernel::matern32(1.0, 0.2).expect("valid"),
            loading_kernel: Kernel::matern32(1.0, 0.3).expect("valid"),
            latent_kernel: Some(Kernel::matern32(1.0, 0.4).expect("valid")),
            latent_dim: Some(5),
        }
    }

    pub fn for_design(design: Design, n: usize, seed: u64) -> Self {
        match design {
            Design::Stationary => Self::stationary(n, seed),
            Design::Deepgp => Self::deepgp(n, seed),
        }
    }
}

/// Ground-truth surfaces at every simulated location, rows in split order
/// (train, then validation, then test).
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub locations: Array2<f64>,
    /// `n x J` factor values `h(s)`.
    pub factors: Array2<f64>,
    /// `n x J^2` loading matrices, each flattened row-major.
    pub loadings: Array2<f64>,
    /// `n x J` spatial effect `w(s) = Psi(s) h(s)`.
    pub effect: Array2<f64>,
    /// `n x J` noise realisation.
    pub noise: Array2<f64>,
    /// `n x J(J-1)/2` true outcome cross-correlations, strict upper triangle.
    pub rho: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: SpatialDataset,
    pub val: SpatialDataset,
    pub test: SpatialDataset,
    pub truth: SimTruth,
    pub params: SimParams,
}

impl SimOutput {
    /// Truth rows belonging to the test split.
    pub fn test_rows(&self) -> std::ops::Range<usize> {
        let start = self.params.split.train + self.params.split.val;
        start..start + self.params.split.test
    }
}

fn uniform_locations<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |_| rng.random::<f64>())
}

fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Bivariate data with stationary exponential-kernel loadings.
pub fn simulate_stationary(params: &SimParams) -> Result<SimOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n;
    let locations = uniform_locations(n, &mut rng);
    let sampler = GpSampler::new(&params.factor_kernel, locations.view(), DEFAULT_JITTER)?;
    let loading_sampler = if params.loading_kernel == params.factor_kernel {
        sampler.clone()
    } else {
        GpSampler::new(&params.loading_kernel, locations.view(), DEFAULT_JITTER)?
    };

    let mut factors = Array2::zeros((n, 2));
    for j in 0..2 {
        factors.column_mut(j).assign(&sampler.sample(&mut rng));
    }
    let mut loadings = Array2::zeros((n, 4));
    // diagonal entries carry a unit offset; the off-diagonal one is mean zero
    let off = params.loading_triangle.off_diagonal();
    for (k, offset) in [(0, 1.0), (off, 0.0), (3, 1.0)] {
        let eta = loading_sampler.sample(&mut rng);
        loadings.column_mut(k).assign(&eta.mapv(|v| v + offset));
    }
    let covariates = standard_normal((n, 2), &mut rng);
    assemble(params, locations, factors, loadings, covariates, &mut rng)
}

/// The stationary design with Fourier-feature draws in place of exact ones,
/// for sample sizes where a dense Gram matrix does not fit in memory.
pub fn simulate_stationary_features(params: &SimParams, n_features: usize) -> Result<SimOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n;
    let locations = uniform_locations(n, &mut rng);
    let factor_sampler = FourierSampler::new(params.factor_kernel, n_features)?;
    let loading_sampler = FourierSampler::new(params.loading_kernel, n_features)?;
    let mut factors = Array2::zeros((n, 2));
    for j in 0..2 {
        factors
            .column_mut(j)
            .assign(&factor_sampler.sample(locations.view(), &mut rng)?);
    }
    let mut loadings = Array2::zeros((n, 4));
    let off = params.loading_triangle.off_diagonal();
    for (k, offset) in [(0, 1.0), (off, 0.0), (3, 1.0)] {
        let eta = loading_sampler.sample(locations.view(), &mut rng)?;
        loadings.column_mut(k).assign(&eta.mapv(|v| v + offset));
    }
    let covariates = standard_normal((n, 2), &mut rng);
    assemble(params, locations, factors, loadings, covariates, &mut rng)
}

/// Bivariate data whose loadings are a GP over a GP-warped latent space.
pub fn simulate_deepgp(params: &SimParams) -> Result<SimOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n;
    let q = params.latent_dim.unwrap_or(5);
    let latent_kernel = params
        .latent_kernel
        .ok_or_else(|| DncError::InvalidParameter("deep-GP design needs a latent kernel".into()))?;
    let locations = uniform_locations(n, &mut rng);

    let factor_sampler = GpSampler::new(&params.factor_kernel, locations.view(), DEFAULT_JITTER)?;
    let mut factors = Array2::zeros((n, 2));
    for j in 0..2 {
        factors.column_mut(j).assign(&factor_sampler.sample(&mut rng));
    }

    let latent_sampler = GpSampler::new(&latent_kernel, locations.view(), DEFAULT_JITTER)?;
    let mut latent = Array2::zeros((n, q));
    for c in 0..q {
        latent.column_mut(c).assign(&latent_sampler.sample(&mut rng));
    }

    let loading_sampler = GpSampler::new(&params.loading_kernel, latent.view(), DEFAULT_JITTER)?;
    let mut loadings = Array2::zeros((n, 4));
    for k in [0, params.loading_triangle.off_diagonal(), 3] {
        loadings.column_mut(k).assign(&loading_sampler.sample(&mut rng));
    }
    let covariates = standard_normal((n, 1), &mut rng);
    assemble(params, locations, factors, loadings, covariates, &mut rng)
}

pub fn simulate(params: &SimParams) -> Result<SimOutput> {
    match params.design {
        Design::Stationary => simulate_stationary(params),
        Design::Deepgp => simulate_deepgp(params),
    }
}

/// Adds regression and noise, computes true correlations and splits.
fn assemble<R: Rng + ?Sized>(
    params: &SimParams,
    locations: Array2<f64>,
    factors: Array2<f64>,
    loadings: Array2<f64>,
    covariates: Array2<f64>,
    rng: &mut R,
) -> Result<SimOutput> {
    let n = params.n;
    let j = factors.ncols();
    if params.split.total() != n || params.split.train == 0 || params.split.val == 0 || params.split.test == 0
    {
        return Err(DncError::InvalidParameter(format!(
            "split {}/{}/{} does not partition n = {n} into non-empty parts",
            params.split.train, params.split.val, params.split.test
        )));
    }
    if !(params.sigma2 > 0.0) {
        return Err(DncError::InvalidParameter("noise variance must be positive".into()));
    }
    let designs = params.design_layout.build(covariates.view(), j)?;
    let beta = Array1::from(params.beta.clone());
    let fixed = crate::model::regression_mean(&designs, &beta)?;

    let mut effect = Array2::zeros((n, j));
    for i in 0..n {
        for r in 0..j {
            effect[[i, r]] = (0..j).map(|c| loadings[[i, r * j + c]] * factors[[i, c]]).sum();
        }
    }
    let sd = params.sigma2.sqrt();
    let noise = standard_normal((n, j), rng).mapv(|z| z * sd);
    let outcomes = &fixed + &effect + &noise;

    let n_pairs = j * (j - 1) / 2;
    let mut rho = Array2::zeros((n, n_pairs));
    let unit = Array2::<f64>::eye(j);
    for i in 0..n {
        let psi = loadings.row(i).to_owned().into_shape_with_order((j, j)).expect("J x J");
        let corr = true_cross_correlation(psi.view(), unit.view(), params.sigma2)?;
        let mut k = 0;
        for a in 0..j {
            for b in a + 1..j {
                rho[[i, k]] = corr[[a, b]];
                k += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let pick = |a: &Array2<f64>| a.select(Axis(0), &order);
    let locations = pick(&locations);
    let designs = designs.select(Axis(0), &order);
    let outcomes = pick(&outcomes);
    let truth = SimTruth {
        factors: pick(&factors),
        loadings: pick(&loadings),
        effect: pick(&effect),
        noise: pick(&noise),
        rho: pick(&rho),
        locations: locations.clone(),
    };

    let cut = |lo: usize, hi: usize| {
        SpatialDataset::new(
            locations.slice(s![lo..hi, ..]).to_owned(),
            designs.slice(s![lo..hi, .., ..]).to_owned(),
            outcomes.slice(s![lo..hi, ..]).to_owned(),
        )
    };
    let a = params.split.train;
    let b = a + params.split.val;
    Ok(SimOutput {
        train: cut(0, a)?,
        val: cut(a, b)?,
        test: cut(b, n)?,
        truth,
        params: params.clone(),
    })
}
