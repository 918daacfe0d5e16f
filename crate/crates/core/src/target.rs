//! Gaussian-mixture data distributions with closed-form noisy marginals.
//!
//! Both perturbations used by the samplers observe a data point `x₁` through
//! a scaled Gaussian channel `y = s·x₁ + n·z`:
//!
//! * diffusion: `s = ᾱ_τ`, `n = σ_τ`;
//! * flow-matching interpolation: `s = t`, `n = 1 − t`.
//!
//! Each component covariance is eigendecomposed once at construction, so the
//! noisy covariance `s²Σ + n²I` is diagonal in a cached basis for every
//! `(s, n)`. Responsibilities go through log-sum-exp.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{cholesky, lower_mul, symmetric_eigen};
use crate::schedule::NoiseSchedule;
use crate::transform::{Provenance, ScoreOracle, VelocityField};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Dirac,
    Gaussian,
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq)]
struct Component<T> {
    weight: T,
    log_weight: T,
    mean: Vec<T>,
    covariance: Vec<T>,
    /// `None` for the Dirac component.
    cholesky: Option<Vec<T>>,
    eigenvalues: Vec<T>,
    /// Row-major; column `i` is the eigenvector of `eigenvalues[i]`.
    eigenvectors: Vec<T>,
}

impl<T: Scalar> Component<T> {
    fn new(weight: T, mean: Vec<T>, covariance: Vec<T>, cholesky: Option<Vec<T>>) -> Self {
        let d = mean.len();
        let (eigenvalues, eigenvectors) = symmetric_eigen(&covariance, d);
        Self {
            weight,
            log_weight: weight.ln(),
            mean,
            covariance,
            cholesky,
            eigenvalues: eigenvalues.into_iter().map(|v| v.max(T::zero())).collect(),
            eigenvectors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution<T> {
    kind: TargetKind,
    dim: usize,
    components: Vec<Component<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation<T> {
    Diffusion { abar: T, sigma: T },
    FlowInterp { t: T },
}

impl<T: Scalar> Perturbation<T> {
    fn channel(self) -> (T, T) {
        match self {
            Perturbation::Diffusion { abar, sigma } => (abar, sigma),
            Perturbation::FlowInterp { t } => (t, T::one() - t),
        }
    }
}

/// The data law pushed through a perturbation channel.
#[derive(Debug, Clone, Copy)]
pub struct NoisyMarginal<'a, T> {
    target: &'a TargetDistribution<T>,
    perturbation: Perturbation<T>,
}

#[derive(Clone, Copy)]
enum Quantity {
    Score,
    PosteriorMean,
    FlowVelocity,
}

impl<T: Scalar> TargetDistribution<T> {
    pub fn dirac(mean: Vec<T>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Target("dimension must be positive".into()));
        }
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::Target("mean must be finite".into()));
        }
        let d = mean.len();
        Ok(Self {
            kind: TargetKind::Dirac,
            dim: d,
            components: vec![Component::new(T::one(), mean, vec![T::zero(); d * d], None)],
        })
    }

    pub fn gaussian(mean: Vec<T>, covariance: Vec<T>) -> Result<Self> {
        let mut target = Self::mixture(vec![T::one()], vec![mean], vec![covariance])?;
        target.kind = TargetKind::Gaussian;
        Ok(target)
    }

    pub fn standard_gaussian(dim: usize) -> Result<Self> {
        let mut cov = vec![T::zero(); dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = T::one();
        }
        Self::gaussian(vec![T::zero(); dim], cov)
    }

    /// Covariances are row-major `d × d`.
    pub fn mixture(weights: Vec<T>, means: Vec<Vec<T>>, covariances: Vec<Vec<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Target("at least one component is required".into()));
        }
        if weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::Target(format!(
                "got {} weights, {} means and {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Target("dimension must be positive".into()));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > T::zero())) {
            return Err(Error::Target(format!("weight of component {i} must be positive")));
        }
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        if (total - T::one()).abs() > T::lit(1e-12).max(T::epsilon() * T::lit(8.0)) {
            return Err(Error::Target(format!(
                "weights sum to 1 is violated (sum = {total})"
            )));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (i, ((w, mean), cov)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if mean.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: mean.len(),
                });
            }
            if cov.len() != d * d {
                return Err(Error::Dimension {
                    expected: d * d,
                    got: cov.len(),
                });
            }
            if !mean.iter().all(|m| m.is_finite()) {
                return Err(Error::Target(format!("mean of component {i} must be finite")));
            }
            let chol = cholesky(&cov, d).ok_or(Error::NotPositiveDefinite { index: i })?;
            components.push(Component::new(w, mean, cov, Some(chol)));
        }
        Ok(Self {
            kind: TargetKind::GaussianMixture,
            dim: d,
            components,
        })
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<T> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Exact mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim];
        for c in &self.components {
            for (mi, &ci) in m.iter_mut().zip(&c.mean) {
                *mi = *mi + c.weight * ci;
            }
        }
        m
    }

    /// Exact mixture covariance `Σ w_k (Σ_k + μ_k μ_kᵀ) − μ μᵀ`, row-major.
    pub fn covariance(&self) -> Vec<T> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = vec![T::zero(); d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] =
                        cov[i * d + j] + c.weight * (c.covariance[i * d + j] + c.mean[i] * c.mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = cov[i * d + j] - mean[i] * mean[j];
            }
        }
        cov
    }

    /// `n` i.i.d. draws (categorical, then Gaussian), one row per draw.
    pub fn sample_exact(&self, n: usize, seed: u64) -> Result<Array2<T>> {
        if n == 0 {
            return Err(Error::domain("n", 0.0, "n >= 1"));
        }
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, d));
        let mut z = vec![T::zero(); d];
        let mut lz = vec![T::zero(); d];
        for mut row in out.rows_mut() {
            let component = self.pick_component(T::uniform01(&mut rng));
            match &component.cholesky {
                None => {
                    for (r, &m) in row.iter_mut().zip(&component.mean) {
                        *r = m;
                    }
                }
                Some(l) => {
                    for zi in z.iter_mut() {
                        *zi = T::standard_normal(&mut rng);
                    }
                    lower_mul(l, &z, &mut lz);
                    for ((r, &m), &e) in row.iter_mut().zip(&component.mean).zip(&lz) {
                        *r = m + e;
                    }
                }
            }
        }
        Ok(out)
    }

    fn pick_component(&self, u: T) -> &Component<T> {
        let mut acc = T::zero();
        for c in &self.components {
            acc = acc + c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("non-empty mixture")
    }

    /// Index of the component each row would most likely come from under
    /// the noiseless law (used to count component frequencies in tests).
    pub fn nearest_component(&self, x: &[T]) -> usize {
        let mut best = (0, T::infinity());
        for (k, c) in self.components.iter().enumerate() {
            let dist = x
                .iter()
                .zip(&c.mean)
                .fold(T::zero(), |a, (&xi, &mi)| a + (xi - mi) * (xi - mi));
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    /// `∇_y log p_τ(y)` for `p_τ = Σ w_k N(ᾱ μ_k, ᾱ²Σ_k + σ²I)`.
    pub fn diffusion_score(&self, y: &[T], abar: T, sigma: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        self.diffusion_score_into(y, abar, sigma, &mut out)?;
        Ok(out)
    }

    pub fn diffusion_score_into(&self, y: &[T], abar: T, sigma: T, out: &mut [T]) -> Result<()> {
        check_sigma(sigma)?;
        self.evaluate(y, abar, sigma, Quantity::Score, out)
    }

    /// `E[x₀ | x_τ = y]`.
    pub fn posterior_mean(&self, y: &[T], abar: T, sigma: T) -> Result<Vec<T>> {
        check_sigma(sigma)?;
        let mut out = vec![T::zero(); self.dim];
        self.evaluate(y, abar, sigma, Quantity::PosteriorMean, &mut out)?;
        Ok(out)
    }

    /// Optimal flow-matching velocity `E[x₁ − x₀ | x_t = x]` for the
    /// interpolation `x_t = (1−t)x₀ + t x₁`, `x₀ ~ N(0, I)`.
    pub fn fm_velocity(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        self.fm_velocity_into(x, t, &mut out)?;
        Ok(out)
    }

    pub fn fm_velocity_into(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        if !(t >= T::zero() && t < T::one()) {
            return Err(Error::domain("t", t.as_f64(), "[0, 1)"));
        }
        self.evaluate(x, t, T::one() - t, Quantity::FlowVelocity, out)
    }

    pub fn marginal(&self, perturbation: Perturbation<T>) -> NoisyMarginal<'_, T> {
        NoisyMarginal {
            target: self,
            perturbation,
        }
    }

    /// Per-component log-likelihood terms `ln w_k − ½ rᵀC⁻¹r − ½ ln det C`
    /// (without the `2π` constant), with `r̃ = Qᵀ(y − s μ_k)` left in `rotated`.
    fn component_terms(
        &self,
        y: &[T],
        scale: T,
        noise: T,
        logits: &mut [T],
        rotated: &mut [T],
    ) -> Result<()> {
        let d = self.dim;
        let half = T::lit(0.5);
        let noise_sq = noise * noise;
        let scale_sq = scale * scale;
        for (k, c) in self.components.iter().enumerate() {
            let rk = &mut rotated[k * d..(k + 1) * d];
            let mut quad = T::zero();
            let mut log_det = T::zero();
            for i in 0..d {
                let mut proj = T::zero();
                for j in 0..d {
                    proj = proj + c.eigenvectors[j * d + i] * (y[j] - scale * c.mean[j]);
                }
                let var = scale_sq * c.eigenvalues[i] + noise_sq;
                if !(var > T::zero()) {
                    return Err(Error::domain(
                        "noisy variance",
                        var.as_f64(),
                        "(0, inf): degenerate covariance",
                    ));
                }
                rk[i] = proj;
                quad = quad + proj * proj / var;
                log_det = log_det + var.ln();
            }
            logits[k] = c.log_weight - half * (quad + log_det);
        }
        Ok(())
    }

    fn evaluate(&self, y: &[T], scale: T, noise: T, what: Quantity, out: &mut [T]) -> Result<()> {
        let d = self.dim;
        if y.len() != d || out.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: if y.len() != d { y.len() } else { out.len() },
            });
        }
        let k_count = self.components.len();
        let mut logits = vec![T::zero(); k_count];
        let mut rotated = vec![T::zero(); k_count * d];
        self.component_terms(y, scale, noise, &mut logits, &mut rotated)?;
        let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total = total + *l;
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        let noise_sq = noise * noise;
        let scale_sq = scale * scale;
        let mut coeff = vec![T::zero(); d];
        for (k, c) in self.components.iter().enumerate() {
            let resp = logits[k] / total;
            if resp == T::zero() {
                continue;
            }
            let rk = &rotated[k * d..(k + 1) * d];
            for i in 0..d {
                let lambda = c.eigenvalues[i];
                let var = scale_sq * lambda + noise_sq;
                coeff[i] = match what {
                    Quantity::Score => -rk[i] / var,
                    Quantity::PosteriorMean => scale * lambda * rk[i] / var,
                    // E[x₁|x] − x = (1−t)[μ + Q diag((tλ − (1−t))/c) r̃], divided by 1−t.
                    Quantity::FlowVelocity => (scale * lambda - noise) * rk[i] / var,
                };
            }
            for (j, o) in out.iter_mut().enumerate() {
                let mut v = match what {
                    Quantity::Score => T::zero(),
                    Quantity::PosteriorMean | Quantity::FlowVelocity => c.mean[j],
                };
                for i in 0..d {
                    v = v + c.eigenvectors[j * d + i] * coeff[i];
                }
                *o = *o + resp * v;
            }
        }
        Ok(())
    }
}

fn check_sigma<T: Scalar>(sigma: T) -> Result<()> {
    if sigma > T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("sigma", sigma.as_f64(), "(0, inf)"))
    }
}

impl<T: Scalar> NoisyMarginal<'_, T> {
    pub fn log_density(&self, y: &[T]) -> Result<T> {
        let target = self.target;
        let d = target.dim;
        if y.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: y.len(),
            });
        }
        let (scale, noise) = self.perturbation.channel();
        let k_count = target.components.len();
        let mut logits = vec![T::zero(); k_count];
        let mut rotated = vec![T::zero(); k_count * d];
        target.component_terms(y, scale, noise, &mut logits, &mut rotated)?;
        let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum = logits.iter().fold(T::zero(), |a, &l| a + (l - max).exp());
        let log_two_pi = T::lit((2.0 * std::f64::consts::PI).ln());
        Ok(max + sum.ln() - T::lit(0.5) * T::from_usize(d).unwrap() * log_two_pi)
    }
}

/// The exact flow-matching velocity of a target, as a [`VelocityField`].
#[derive(Debug, Clone, Copy)]
pub struct AnalyticVelocity<'a, T> {
    target: &'a TargetDistribution<T>,
}

impl<'a, T: Scalar> AnalyticVelocity<'a, T> {
    pub fn new(target: &'a TargetDistribution<T>) -> Self {
        Self { target }
    }
}

impl<T: Scalar> VelocityField<T> for AnalyticVelocity<'_, T> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn provenance(&self) -> Provenance {
        Provenance::AnalyticFm
    }

    fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        self.target.fm_velocity_into(x, t, out)
    }
}

/// Exact diffusion score of a target under a schedule.
#[derive(Debug, Clone)]
pub struct TargetScore<'a, T> {
    target: &'a TargetDistribution<T>,
    schedule: NoiseSchedule<T>,
}

impl<'a, T: Scalar> TargetScore<'a, T> {
    pub fn new(target: &'a TargetDistribution<T>, schedule: NoiseSchedule<T>) -> Self {
        Self { target, schedule }
    }

    pub fn target(&self) -> &TargetDistribution<T> {
        self.target
    }
}

impl<T: Scalar> ScoreOracle<T> for TargetScore<'_, T> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        let c = self.schedule.marginal_coeffs(tau)?;
        self.target.diffusion_score_into(y, c.abar, c.sigma, out)
    }
}
