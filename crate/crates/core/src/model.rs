//! Spatially varying coregionalization built from dense networks.
//!
//! At a location `s` the model evaluates `J` factor networks `h_j(s)` and
//! `J(J+1)/2` loading networks that fill the upper triangle of `Psi(s)` in
//! row-major order: (1,1), (1,2), ..., (1,J), (2,2), ..., (J,J). The outcome
//! mean is `X(s) beta + Psi(s) h(s)` with `X(s)` a `J x p` design matrix.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{DncError, Result};
use crate::nn::{check_keep_prob, DenseNetwork, DropoutMaskSet, ForwardCache, GradientSet};

/// Hidden-layer widths for the two network families. Inputs are 2-D locations
/// and outputs are scalars.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub factor_hidden: Vec<usize>,
    pub loading_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            factor_hidden: vec![64, 64],
            loading_hidden: vec![64, 64],
        }
    }
}

impl Architecture {
    fn widths(hidden: &[usize]) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(2);
        w.extend_from_slice(hidden);
        w.push(1);
        w
    }

    pub fn factor_widths(&self) -> Vec<usize> {
        Self::widths(&self.factor_hidden)
    }

    pub fn loading_widths(&self) -> Vec<usize> {
        Self::widths(&self.loading_hidden)
    }
}

/// Dropout and weight-decay settings carried by a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub keep_prob_h: f64,
    pub keep_prob_psi: f64,
    pub lambda_w: f64,
    pub lambda_b: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            keep_prob_h: 0.8,
            keep_prob_psi: 0.8,
            lambda_w: 1e-4,
            lambda_b: 1e-4,
        }
    }
}

impl Regularization {
    pub fn validate(&self) -> Result<()> {
        check_keep_prob(self.keep_prob_h)?;
        check_keep_prob(self.keep_prob_psi)?;
        if !(self.lambda_w >= 0.0 && self.lambda_b >= 0.0)
            || !self.lambda_w.is_finite()
            || !self.lambda_b.is_finite()
        {
            return Err(DncError::InvalidParameter(format!(
                "penalties must be finite and non-negative, got {} and {}",
                self.lambda_w, self.lambda_b
            )));
        }
        Ok(())
    }
}

/// Rows per forward pass when evaluating many locations.
pub const LATENT_CHUNK: usize = 4096;

/// Positions of the loading networks in the upper triangle, row-major.
pub fn upper_triangle_positions(j: usize) -> Vec<(usize, usize)> {
    (0..j).flat_map(|r| (r..j).map(move |c| (r, c))).collect()
}

pub fn n_loadings(j: usize) -> usize {
    j * (j + 1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    locations: Array2<f64>,
    designs: Array3<f64>,
    outcomes: Array2<f64>,
}

impl SpatialDataset {
    /// `locations` is `n x 2`, `designs` is `n x J x p`, `outcomes` is `n x J`.
    pub fn new(locations: Array2<f64>, designs: Array3<f64>, outcomes: Array2<f64>) -> Result<Self> {
        let n = locations.nrows();
        if n == 0 {
            return Err(DncError::EmptyData);
        }
        if locations.ncols() != 2 {
            return Err(DncError::Shape(format!(
                "locations must have 2 columns, got {}",
                locations.ncols()
            )));
        }
        let (dn, dj, dp) = designs.dim();
        if dn != n || outcomes.nrows() != n {
            return Err(DncError::Shape(format!(
                "record counts differ: {n} locations, {dn} designs, {} outcomes",
                outcomes.nrows()
            )));
        }
        if dj != outcomes.ncols() || dj == 0 || dp == 0 {
            return Err(DncError::Shape(format!(
                "design is {dj} x {dp} but there are {} outcomes",
                outcomes.ncols()
            )));
        }
        let finite = locations.iter().all(|x| x.is_finite())
            && designs.iter().all(|x| x.is_finite())
            && outcomes.iter().all(|x| x.is_finite());
        if !finite {
            return Err(DncError::Numeric("dataset contains NaN or infinite values".into()));
        }
        Ok(Self {
            locations: locations.as_standard_layout().into_owned(),
            designs: designs.as_standard_layout().into_owned(),
            outcomes: outcomes.as_standard_layout().into_owned(),
        })
    }

    pub fn n(&self) -> usize {
        self.locations.nrows()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.designs.dim().2
    }

    pub fn locations(&self) -> &Array2<f64> {
        &self.locations
    }

    pub fn designs(&self) -> &Array3<f64> {
        &self.designs
    }

    pub fn outcomes(&self) -> &Array2<f64> {
        &self.outcomes
    }

    pub fn location(&self, i: usize) -> [f64; 2] {
        [self.locations[[i, 0]], self.locations[[i, 1]]]
    }

    pub fn design(&self, i: usize) -> ArrayView2<'_, f64> {
        self.designs.index_axis(Axis(0), i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<SpatialDataset> {
        if indices.is_empty() {
            return Err(DncError::EmptyData);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(DncError::Shape(format!(
                "index {bad} out of range for {} records",
                self.n()
            )));
        }
        Ok(SpatialDataset {
            locations: self.locations.select(Axis(0), indices),
            designs: self.designs.select(Axis(0), indices),
            outcomes: self.outcomes.select(Axis(0), indices),
        })
    }
}

/// `X(s_i) beta` for every record, `n x J`.
pub fn regression_mean(designs: &Array3<f64>, beta: &Array1<f64>) -> Result<Array2<f64>> {
    let (n, j, p) = designs.dim();
    if beta.len() != p {
        return Err(DncError::Shape(format!(
            "beta has {} entries, designs have {p} columns",
            beta.len()
        )));
    }
    let flat = designs
        .view()
        .into_shape_with_order((n * j, p))
        .map_err(|e| DncError::Shape(e.to_string()))?;
    flat.dot(beta)
        .into_shape_with_order((n, j))
        .map_err(|e| DncError::Shape(e.to_string()))
}

/// How per-location covariates map onto the `J x p` design matrix `X(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignLayout {
    /// Every row of `X(s)` is the full covariate vector.
    Shared,
    /// Covariates are split into `J` equal blocks; outcome `j` sees only block
    /// `j` and `X(s)` is block diagonal.
    PerOutcome,
}

impl DesignLayout {
    /// Builds `n x J x p` designs from `n x p` covariates.
    pub fn build(self, covariates: ArrayView2<f64>, n_outcomes: usize) -> Result<Array3<f64>> {
        let (n, p) = covariates.dim();
        if n_outcomes == 0 || p == 0 {
            return Err(DncError::Shape("need at least one outcome and one covariate".into()));
        }
        let mut out = Array3::zeros((n, n_outcomes, p));
        match self {
            DesignLayout::Shared => {
                for i in 0..n {
                    for j in 0..n_outcomes {
                        out.slice_mut(s![i, j, ..]).assign(&covariates.row(i));
                    }
                }
            }
            DesignLayout::PerOutcome => {
                if p % n_outcomes != 0 {
                    return Err(DncError::Shape(format!(
                        "per-outcome layout needs a multiple of {n_outcomes} covariates, got {p}"
                    )));
                }
                let k = p / n_outcomes;
                for i in 0..n {
                    for j in 0..n_outcomes {
                        for c in j * k..(j + 1) * k {
                            out[[i, j, c]] = covariates[[i, c]];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Recovers the `n x p` covariates from designs built with this layout.
    pub fn covariates(self, designs: &Array3<f64>) -> Result<Array2<f64>> {
        let (n, j, p) = designs.dim();
        let mut out = Array2::zeros((n, p));
        match self {
            DesignLayout::Shared => out.assign(&designs.slice(s![.., 0, ..])),
            DesignLayout::PerOutcome => {
                if j == 0 || p % j != 0 {
                    return Err(DncError::Shape(format!(
                        "per-outcome layout needs a multiple of {j} covariates, got {p}"
                    )));
                }
                let k = p / j;
                for i in 0..n {
                    for c in 0..p {
                        out[[i, c]] = designs[[i, c / k, c]];
                    }
                }
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for DesignLayout {
    type Err = DncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(DesignLayout::Shared),
            "per_outcome" | "per-outcome" => Ok(DesignLayout::PerOutcome),
            other => Err(DncError::InvalidParameter(format!(
                "unknown layout '{other}' (expected shared or per_outcome)"
            ))),
        }
    }
}

/// Affine map from raw locations to network inputs,
/// `(s - center) / half_range` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoordinateScaler {
    pub center: [f64; 2],
    pub half_range: [f64; 2],
}

impl Default for CoordinateScaler {
    fn default() -> Self {
        Self::identity()
    }
}

impl CoordinateScaler {
    pub fn identity() -> Self {
        Self {
            center: [0.0, 0.0],
            half_range: [1.0, 1.0],
        }
    }

    /// Min-max map of `locations` (`n x 2`) onto `[-1, 1]^2`. A coordinate
    /// with zero spread is only centred.
    pub fn fit(locations: ArrayView2<f64>) -> Result<Self> {
        if locations.ncols() != 2 {
            return Err(DncError::Shape(format!(
                "locations must have 2 columns, got {}",
                locations.ncols()
            )));
        }
        if locations.nrows() == 0 {
            return Err(DncError::EmptyData);
        }
        let mut out = Self::identity();
        for c in 0..2 {
            let col = locations.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.center[c] = 0.5 * (lo + hi);
            if hi > lo {
                out.half_range[c] = 0.5 * (hi - lo);
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.center.iter().all(|v| v.is_finite())
            && self.half_range.iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(DncError::InvalidParameter(format!(
                "invalid coordinate scaler {self:?}"
            )));
        }
        Ok(())
    }

    pub fn transform(&self, locations: ArrayView2<f64>) -> Array2<f64> {
        let mut out = locations.to_owned();
        for c in 0..2.min(out.ncols()) {
            let (m, h) = (self.center[c], self.half_range[c]);
            out.column_mut(c).mapv_inplace(|v| (v - m) / h);
        }
        out
    }
}

/// One mask set per network, factor networks first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMasks {
    pub factor: Vec<DropoutMaskSet>,
    pub loading: Vec<DropoutMaskSet>,
}

#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub factor: Vec<GradientSet>,
    pub loading: Vec<GradientSet>,
}

impl ModelGradients {
    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.factor
            .iter()
            .chain(&self.loading)
            .flat_map(|g| g.slices())
    }

    pub fn is_finite(&self) -> bool {
        self.factor.iter().chain(&self.loading).all(|g| g.is_finite())
    }
}

/// Latent surfaces evaluated at a batch of locations.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// `n x J` factor values.
    pub factors: Array2<f64>,
    /// `n x O` loading values in upper-triangle order.
    pub loadings: Array2<f64>,
}

impl LatentBatch {
    /// `w(s_i) = Psi(s_i) h(s_i)`, `n x J`.
    pub fn spatial_effect(&self) -> Array2<f64> {
        let (n, j) = self.factors.dim();
        let mut w = Array2::zeros((n, j));
        for (o, (r, c)) in upper_triangle_positions(j).into_iter().enumerate() {
            let psi = self.loadings.column(o);
            let h = self.factors.column(c);
            let mut col = w.column_mut(r);
            for i in 0..n {
                col[i] += psi[i] * h[i];
            }
        }
        w
    }

    pub fn loading_matrix(&self, i: usize) -> Array2<f64> {
        let j = self.factors.ncols();
        let mut psi = Array2::zeros((j, j));
        for (o, (r, c)) in upper_triangle_positions(j).into_iter().enumerate() {
            psi[[r, c]] = self.loadings[[i, o]];
        }
        psi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DncModel {
    n_outcomes: usize,
    n_covariates: usize,
    factor_nets: Vec<DenseNetwork>,
    loading_nets: Vec<DenseNetwork>,
    beta: Array1<f64>,
    sigma2: f64,
    reg: Regularization,
    scaler: CoordinateScaler,
}

fn check_latent_net(net: &DenseNetwork, what: &str) -> Result<()> {
    if net.input_dim() != 2 || net.output_dim() != 1 {
        return Err(DncError::Shape(format!(
            "{what} network must map R^2 to R, widths are {:?}",
            net.widths()
        )));
    }
    Ok(())
}

impl DncModel {
    /// Fresh model with He-initialised networks, `beta = 0` and `sigma2 = 1`.
    pub fn new<R: Rng + ?Sized>(
        n_outcomes: usize,
        n_covariates: usize,
        arch: &Architecture,
        reg: Regularization,
        rng: &mut R,
    ) -> Result<Self> {
        if n_outcomes == 0 || n_covariates == 0 {
            return Err(DncError::InvalidParameter(
                "need at least one outcome and one covariate".into(),
            ));
        }
        let fw = arch.factor_widths();
        let lw = arch.loading_widths();
        let factor_nets = (0..n_outcomes)
            .map(|_| DenseNetwork::he_init(&fw, rng))
            .collect::<Result<Vec<_>>>()?;
        let loading_nets = (0..n_loadings(n_outcomes))
            .map(|_| DenseNetwork::he_init(&lw, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(
            factor_nets,
            loading_nets,
            Array1::zeros(n_covariates),
            1.0,
            reg,
        )
    }

    pub fn from_parts(
        factor_nets: Vec<DenseNetwork>,
        loading_nets: Vec<DenseNetwork>,
        beta: Array1<f64>,
        sigma2: f64,
        reg: Regularization,
    ) -> Result<Self> {
        let j = factor_nets.len();
        if j == 0 {
            return Err(DncError::InvalidParameter("need at least one factor network".into()));
        }
        if loading_nets.len() != n_loadings(j) {
            return Err(DncError::Shape(format!(
                "{j} outcomes need {} loading networks, got {}",
                n_loadings(j),
                loading_nets.len()
            )));
        }
        for net in &factor_nets {
            check_latent_net(net, "factor")?;
        }
        for net in &loading_nets {
            check_latent_net(net, "loading")?;
        }
        if beta.is_empty() || !beta.iter().all(|b| b.is_finite()) {
            return Err(DncError::InvalidParameter("beta must be non-empty and finite".into()));
        }
        check_sigma2(sigma2)?;
        reg.validate()?;
        Ok(Self {
            n_outcomes: j,
            n_covariates: beta.len(),
            factor_nets,
            loading_nets,
            beta,
            sigma2,
            reg,
            scaler: CoordinateScaler::identity(),
        })
    }

    pub fn scaler(&self) -> CoordinateScaler {
        self.scaler
    }

    pub fn set_scaler(&mut self, scaler: CoordinateScaler) -> Result<()> {
        scaler.validate()?;
        self.scaler = scaler;
        Ok(())
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn factor_nets(&self) -> &[DenseNetwork] {
        &self.factor_nets
    }

    pub fn loading_nets(&self) -> &[DenseNetwork] {
        &self.loading_nets
    }

    pub fn factor_net_mut(&mut self, j: usize) -> &mut DenseNetwork {
        &mut self.factor_nets[j]
    }

    pub fn loading_net_mut(&mut self, o: usize) -> &mut DenseNetwork {
        &mut self.loading_nets[o]
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    pub fn set_beta(&mut self, beta: Array1<f64>) -> Result<()> {
        if beta.len() != self.n_covariates || !beta.iter().all(|b| b.is_finite()) {
            return Err(DncError::InvalidParameter(format!(
                "beta must have {} finite entries",
                self.n_covariates
            )));
        }
        self.beta = beta;
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn set_sigma2(&mut self, sigma2: f64) -> Result<()> {
        check_sigma2(sigma2)?;
        self.sigma2 = sigma2;
        Ok(())
    }

    pub fn regularization(&self) -> Regularization {
        self.reg
    }

    pub fn set_regularization(&mut self, reg: Regularization) -> Result<()> {
        reg.validate()?;
        self.reg = reg;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.factor_nets
            .iter()
            .chain(&self.loading_nets)
            .map(|n| n.n_params())
            .sum()
    }

    pub(crate) fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.factor_nets
            .iter_mut()
            .chain(self.loading_nets.iter_mut())
            .flat_map(|n| n.param_slices_mut())
    }

    /// All network parameters, factor networks first.
    pub fn flatten_params(&self) -> Vec<f64> {
        self.factor_nets
            .iter()
            .chain(&self.loading_nets)
            .flat_map(|n| n.flatten())
            .collect()
    }

    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelMasks> {
        let factor = self
            .factor_nets
            .iter()
            .map(|n| n.sample_masks(self.reg.keep_prob_h, rng))
            .collect::<Result<Vec<_>>>()?;
        let loading = self
            .loading_nets
            .iter()
            .map(|n| n.sample_masks(self.reg.keep_prob_psi, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelMasks { factor, loading })
    }

    fn check_masks(&self, masks: &ModelMasks) -> Result<()> {
        if masks.factor.len() != self.factor_nets.len()
            || masks.loading.len() != self.loading_nets.len()
        {
            return Err(DncError::Shape(format!(
                "expected {} factor and {} loading mask sets, got {} and {}",
                self.factor_nets.len(),
                self.loading_nets.len(),
                masks.factor.len(),
                masks.loading.len()
            )));
        }
        Ok(())
    }

    /// Copy with every network weight-scaled by its keep probability.
    pub fn weight_scaled(&self) -> Result<DncModel> {
        let mut out = self.clone();
        for net in out.factor_nets.iter_mut() {
            *net = net.weight_scaled(self.reg.keep_prob_h)?;
        }
        for net in out.loading_nets.iter_mut() {
            *net = net.weight_scaled(self.reg.keep_prob_psi)?;
        }
        Ok(out)
    }

    /// Copy of the model with every network's dropped units zeroed out.
    pub fn apply_masks(&self, masks: &ModelMasks) -> Result<DncModel> {
        self.check_masks(masks)?;
        let mut out = self.clone();
        for (net, m) in out.factor_nets.iter_mut().zip(&masks.factor) {
            *net = net.apply_mask_to_params(m)?;
        }
        for (net, m) in out.loading_nets.iter_mut().zip(&masks.loading) {
            *net = net.apply_mask_to_params(m)?;
        }
        Ok(out)
    }

    /// Factors and loadings at every row of `locations` (`n x 2`).
    pub fn latent_batch(
        &self,
        locations: ArrayView2<f64>,
        masks: Option<&ModelMasks>,
    ) -> Result<LatentBatch> {
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        let n = locations.nrows();
        let inputs = self.scaler.transform(locations);
        let locations = inputs.view();
        let mut factors = Array2::zeros((n, self.n_outcomes));
        let mut loadings = Array2::zeros((n, self.loading_nets.len()));
        // row chunks bound the size of the hidden activations
        for start in (0..n).step_by(LATENT_CHUNK) {
            let rows = s![start..(start + LATENT_CHUNK).min(n), ..];
            let chunk = locations.slice(rows);
            for (j, net) in self.factor_nets.iter().enumerate() {
                let out = net.predict_batch(chunk, masks.map(|m| &m.factor[j]))?;
                factors.slice_mut(rows).column_mut(j).assign(&out.column(0));
            }
            for (o, net) in self.loading_nets.iter().enumerate() {
                let out = net.predict_batch(chunk, masks.map(|m| &m.loading[o]))?;
                loadings.slice_mut(rows).column_mut(o).assign(&out.column(0));
            }
        }
        Ok(LatentBatch { factors, loadings })
    }

    pub fn eval_factors(&self, s: [f64; 2], masks: Option<&ModelMasks>) -> Result<Array1<f64>> {
        let loc = Array2::from_shape_vec((1, 2), s.to_vec()).expect("1 x 2");
        let latent = self.latent_batch(loc.view(), masks)?;
        Ok(latent.factors.row(0).to_owned())
    }

    pub fn assemble_loading(&self, s: [f64; 2], masks: Option<&ModelMasks>) -> Result<Array2<f64>> {
        let loc = Array2::from_shape_vec((1, 2), s.to_vec()).expect("1 x 2");
        Ok(self.latent_batch(loc.view(), masks)?.loading_matrix(0))
    }

    /// `X beta + Psi(s) h(s)` for one location and its `J x p` design.
    pub fn predict_mean(
        &self,
        s: [f64; 2],
        design: ArrayView2<f64>,
        masks: Option<&ModelMasks>,
    ) -> Result<Array1<f64>> {
        if design.dim() != (self.n_outcomes, self.n_covariates) {
            return Err(DncError::Shape(format!(
                "design is {:?}, expected ({}, {})",
                design.dim(),
                self.n_outcomes,
                self.n_covariates
            )));
        }
        let h = self.eval_factors(s, masks)?;
        let psi = self.assemble_loading(s, masks)?;
        Ok(design.dot(&self.beta) + psi.dot(&h))
    }

    fn check_dataset(&self, data: &SpatialDataset) -> Result<()> {
        if data.n_outcomes() != self.n_outcomes || data.n_covariates() != self.n_covariates {
            return Err(DncError::Shape(format!(
                "dataset has J = {}, p = {}; model has J = {}, p = {}",
                data.n_outcomes(),
                data.n_covariates(),
                self.n_outcomes,
                self.n_covariates
            )));
        }
        Ok(())
    }

    /// Predicted means for every record of `data`, `n x J`.
    pub fn predict_dataset(
        &self,
        data: &SpatialDataset,
        masks: Option<&ModelMasks>,
    ) -> Result<Array2<f64>> {
        self.check_dataset(data)?;
        let w = self.latent_batch(data.locations().view(), masks)?.spatial_effect();
        Ok(regression_mean(data.designs(), &self.beta)? + w)
    }

    /// `y(s_i) - yhat(s_i)` with deterministic (mask-free) networks, `n x J`.
    pub fn residual_matrix(&self, data: &SpatialDataset) -> Result<Array2<f64>> {
        Ok(data.outcomes() - &self.predict_dataset(data, None)?)
    }

    /// Weighted L2 penalty over every layer of every network.
    pub fn penalty(&self) -> f64 {
        let (w, b) = self
            .factor_nets
            .iter()
            .chain(&self.loading_nets)
            .map(|n| n.squared_norms())
            .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        self.reg.lambda_w * w + self.reg.lambda_b * b
    }

    /// Penalised mini-batch loss
    /// `sum_i ||y_i - yhat_i||^2 / (2 |B| sigma2) + lambda_w sum ||W||^2 + lambda_b sum ||b||^2`.
    ///
    /// With the full dataset as the batch and `lambda = keep_prob / (2 n)`,
    /// `n` times the average of this loss over a fixed collection of mask sets
    /// equals the negated Monte Carlo variational objective (average Gaussian
    /// log-likelihood of the masked networks minus the `keep_prob / 2`
    /// weighted norms) minus the constant `n J log(2 pi sigma2) / 2`.
    pub fn loss(&self, batch: &SpatialDataset, masks: Option<&ModelMasks>) -> Result<f64> {
        let pred = self.predict_dataset(batch, masks)?;
        let sq: f64 = (batch.outcomes() - &pred).iter().map(|r| r * r).sum();
        Ok(sq / (2.0 * batch.n() as f64 * self.sigma2) + self.penalty())
    }

    /// Loss and its gradient with respect to every network parameter.
    pub fn loss_and_gradient(
        &self,
        batch: &SpatialDataset,
        masks: Option<&ModelMasks>,
    ) -> Result<(f64, ModelGradients)> {
        self.check_dataset(batch)?;
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        let n = batch.n();
        let j = self.n_outcomes;
        let inputs = self.scaler.transform(batch.locations().view());
        let locs = inputs.view();

        let factor_caches: Vec<ForwardCache> = self
            .factor_nets
            .iter()
            .enumerate()
            .map(|(k, net)| net.forward_batch(locs, masks.map(|m| &m.factor[k])))
            .collect::<Result<_>>()?;
        let loading_caches: Vec<ForwardCache> = self
            .loading_nets
            .iter()
            .enumerate()
            .map(|(o, net)| net.forward_batch(locs, masks.map(|m| &m.loading[o])))
            .collect::<Result<_>>()?;

        let positions = upper_triangle_positions(j);
        let mut pred = regression_mean(batch.designs(), &self.beta)?;
        for (o, &(r, c)) in positions.iter().enumerate() {
            let psi = loading_caches[o].output().column(0);
            let h = factor_caches[c].output().column(0);
            let mut col = pred.column_mut(r);
            for i in 0..n {
                col[i] += psi[i] * h[i];
            }
        }
        let resid = batch.outcomes() - &pred;
        let sq: f64 = resid.iter().map(|r| r * r).sum();
        let loss = sq / (2.0 * n as f64 * self.sigma2) + self.penalty();

        // d loss / d yhat
        let g = resid.mapv(|r| -r / (n as f64 * self.sigma2));
        let mut grad_h = Array2::zeros((n, j));
        let mut grad_psi = Array2::zeros((n, positions.len()));
        for (o, &(r, c)) in positions.iter().enumerate() {
            let psi = loading_caches[o].output().column(0);
            let h = factor_caches[c].output().column(0);
            for i in 0..n {
                grad_h[[i, c]] += g[[i, r]] * psi[i];
                grad_psi[[i, o]] = g[[i, r]] * h[i];
            }
        }

        let reg = self.reg;
        let factor = self
            .factor_nets
            .iter()
            .enumerate()
            .map(|(k, net)| {
                let mut gs = net.backward_batch(
                    &factor_caches[k],
                    grad_h.slice(s![.., k..k + 1]),
                    masks.map(|m| &m.factor[k]),
                )?;
                gs.add_l2(net, reg.lambda_w, reg.lambda_b);
                Ok(gs)
            })
            .collect::<Result<Vec<_>>>()?;
        let loading = self
            .loading_nets
            .iter()
            .enumerate()
            .map(|(o, net)| {
                let mut gs = net.backward_batch(
                    &loading_caches[o],
                    grad_psi.slice(s![.., o..o + 1]),
                    masks.map(|m| &m.loading[o]),
                )?;
                gs.add_l2(net, reg.lambda_w, reg.lambda_b);
                Ok(gs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, ModelGradients { factor, loading }))
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(DncError::InvalidParameter(format!(
            "noise variance must be positive and finite, got {sigma2}"
        )))
    }
}
