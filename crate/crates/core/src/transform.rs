//! Diffusion-to-flow reparameterization.
//!
//! For a diffusion model with score `∇ log p_τ` and a flow-matching model on
//! the same data law, the optimal velocity at flow time `t = ᾱ_τ/(ᾱ_τ+σ_τ)`
//! is
//!
//! ```text
//! (1 − t) v(x, t) = (σ_τ/ᾱ_τ) [x + σ_τ ∇ log p_τ((ᾱ_τ + σ_τ) x)]
//! ```
//!
//! [`FlowVelocity`] evaluates the right-hand side with one score query per
//! call. Below the start time `t_min` the map from τ is undefined and the
//! velocity is frozen at its `t_min` value (see [`FrozenRule`]).

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::schedule::{NoiseSchedule, TimeMap};
use crate::{Error, Result, Scalar};

/// Largest flow time at which fields are evaluated. The transformed
/// velocity is a 0/0 limit at t = 1.
pub const MAX_EVAL_TIME: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    AnalyticFm,
    TransformedDiffusion,
    Synthetic,
}

/// A velocity field `v(x, t)` on `t ∈ [0, 1)`.
pub trait VelocityField<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    fn provenance(&self) -> Provenance;

    fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()>;

    fn velocity(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim()];
        self.evaluate(x, t, &mut out)?;
        Ok(out)
    }
}

/// A diffusion score `∇_y log p_τ(y)` for `τ ∈ (0, T]`.
pub trait ScoreOracle<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule<T>;

    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()>;
}

impl<T: Scalar, F: VelocityField<T> + ?Sized> VelocityField<T> for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
    fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        (**self).evaluate(x, t, out)
    }
}

impl<T: Scalar, S: ScoreOracle<T> + ?Sized> ScoreOracle<T> for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        (**self).schedule()
    }
    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        (**self).score(y, tau, out)
    }
}

/// Counts evaluations of the wrapped field or score oracle. The counter is
/// atomic so concurrent chains can share one wrapper.
#[derive(Debug, Default)]
pub struct Counted<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.calls.load(Ordering::Acquire)
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<T: Scalar, F: VelocityField<T>> VelocityField<T> for Counted<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn provenance(&self) -> Provenance {
        self.inner.provenance()
    }
    fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::AcqRel);
        self.inner.evaluate(x, t, out)
    }
}

impl<T: Scalar, S: ScoreOracle<T>> ScoreOracle<T> for Counted<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        self.inner.schedule()
    }
    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::AcqRel);
        self.inner.score(y, tau, out)
    }
}

/// What to return for `t < t_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrozenRule {
    /// The full transformed velocity at `t_min`, `1/(1 − t_min)` factor included.
    #[default]
    AtStartTime,
    /// `σ_T [x + σ_T s((ᾱ_T + σ_T) x, T)] / ᾱ_T`, exactly as the published
    /// pseudocode writes the frozen branch (no `1/(1 − t)` factor).
    Verbatim,
}

impl FrozenRule {
    pub fn as_str(self) -> &'static str {
        match self {
            FrozenRule::AtStartTime => "at-start-time",
            FrozenRule::Verbatim => "verbatim",
        }
    }
}

impl fmt::Display for FrozenRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrozenRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at-start-time" => Ok(Self::AtStartTime),
            "verbatim" => Ok(Self::Verbatim),
            _ => Err(Error::Invalid(format!("unknown frozen rule `{s}`"))),
        }
    }
}

/// A diffusion score reparameterized as a flow-matching velocity.
#[derive(Debug, Clone)]
pub struct FlowVelocity<T, S> {
    score: S,
    map: TimeMap<T>,
    frozen: FrozenRule,
}

/// Wraps `score` as a flow velocity. The map must be built on the score's schedule.
pub fn to_flow_velocity<T: Scalar, S: ScoreOracle<T>>(
    score: S,
    map: TimeMap<T>,
) -> Result<FlowVelocity<T, S>> {
    if score.schedule() != map.schedule() {
        return Err(Error::Schedule(
            "time map and score oracle use different schedules".into(),
        ));
    }
    Ok(FlowVelocity {
        score,
        map,
        frozen: FrozenRule::default(),
    })
}

impl<T: Scalar, S: ScoreOracle<T>> FlowVelocity<T, S> {
    pub fn with_frozen_rule(mut self, rule: FrozenRule) -> Self {
        self.frozen = rule;
        self
    }

    pub fn frozen_rule(&self) -> FrozenRule {
        self.frozen
    }

    pub fn map(&self) -> &TimeMap<T> {
        &self.map
    }

    pub fn score_oracle(&self) -> &S {
        &self.score
    }

    /// The velocity used for every `t < t_min`.
    pub fn frozen_velocity(&self, x: &[T], out: &mut [T]) -> Result<()> {
        let horizon = self.map.schedule().horizon();
        let c = self.map.terminal_coeffs();
        match self.frozen {
            FrozenRule::AtStartTime => {
                self.transformed(x, horizon, c.abar, c.sigma, c.one_minus_flow_time(), out)
            }
            FrozenRule::Verbatim => {
                let scaled: Vec<T> = x.iter().map(|&xi| (c.abar + c.sigma) * xi).collect();
                self.score.score(&scaled, horizon, out)?;
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = c.sigma * (xi + c.sigma * *o) / c.abar;
                }
                Ok(())
            }
        }
    }

    fn transformed(&self, x: &[T], tau: T, abar: T, sigma: T, one_minus_t: T, out: &mut [T]) -> Result<()> {
        let scaled: Vec<T> = x.iter().map(|&xi| (abar + sigma) * xi).collect();
        self.score.score(&scaled, tau, out)?;
        let ratio = sigma / abar;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = ratio * (xi + sigma * *o) / one_minus_t;
        }
        Ok(())
    }
}

impl<T: Scalar, S: ScoreOracle<T>> VelocityField<T> for FlowVelocity<T, S> {
    fn dim(&self) -> usize {
        self.score.dim()
    }

    fn provenance(&self) -> Provenance {
        Provenance::TransformedDiffusion
    }

    fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        if !(t >= T::zero() && t < T::one()) {
            return Err(Error::domain("t", t.as_f64(), "[0, 1)"));
        }
        if x.len() != self.dim() || out.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len().min(out.len()),
            });
        }
        if self.map.is_frozen(t) {
            return self.frozen_velocity(x, out);
        }
        let t = t.min(T::lit(MAX_EVAL_TIME));
        let tau = self.map.diffusion_time(t)?;
        let c = self.map.schedule().marginal_coeffs(tau)?;
        self.transformed(x, tau, c.abar, c.sigma, T::one() - t, out)
    }
}

/// Noise-prediction model `ε(y, τ)`.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn predict_noise(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()>;
}

/// Data-prediction model `x̂₀(y, τ)`.
pub trait DataPredictor<T: Scalar>: Sync {
    fn predict_data(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()>;
}

/// Score from a noise prediction: `s = −ε/σ_τ`.
#[derive(Debug, Clone)]
pub struct FromNoise<P, T> {
    model: P,
    schedule: NoiseSchedule<T>,
    dim: usize,
}

impl<P, T> FromNoise<P, T> {
    pub fn new(model: P, schedule: NoiseSchedule<T>, dim: usize) -> Self {
        Self { model, schedule, dim }
    }
}

impl<T: Scalar, P: NoisePredictor<T>> ScoreOracle<T> for FromNoise<P, T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }
    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        let c = self.schedule.marginal_coeffs(tau)?;
        if !(c.sigma > T::zero()) {
            return Err(Error::domain("tau", tau.as_f64(), "(0, T]"));
        }
        self.model.predict_noise(y, tau, out)?;
        out.iter_mut().for_each(|o| *o = -*o / c.sigma);
        Ok(())
    }
}

/// Score from a data prediction by inverting Tweedie's formula:
/// `s = (ᾱ_τ x̂₀ − y)/σ_τ²`.
#[derive(Debug, Clone)]
pub struct FromData<P, T> {
    model: P,
    schedule: NoiseSchedule<T>,
    dim: usize,
}

impl<P, T> FromData<P, T> {
    pub fn new(model: P, schedule: NoiseSchedule<T>, dim: usize) -> Self {
        Self { model, schedule, dim }
    }
}

impl<T: Scalar, P: DataPredictor<T>> ScoreOracle<T> for FromData<P, T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }
    fn score(&self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        let c = self.schedule.marginal_coeffs(tau)?;
        if !(c.sigma > T::zero()) {
            return Err(Error::domain("tau", tau.as_f64(), "(0, T]"));
        }
        self.model.predict_data(y, tau, out)?;
        let var = c.sigma * c.sigma;
        for (o, &yi) in out.iter_mut().zip(y) {
            *o = (c.abar * *o - yi) / var;
        }
        Ok(())
    }
}

/// `v(x, t) = λ x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField<T> {
    pub rate: T,
    pub offset: Vec<T>,
}

impl<T: Scalar> LinearField<T> {
    /// Closed-form flow from `x` at time `t0` to `t1`.
    pub fn solution(&self, x: &[T], t0: T, t1: T) -> Vec<T> {
        let dt = t1 - t0;
        let growth = (self.rate * dt).exp();
        let drift = if self.rate == T::zero() {
            dt
        } else {
            (self.rate * dt).exp_m1() / self.rate
        };
        x.iter()
            .zip(&self.offset)
            .map(|(&xi, &ci)| growth * xi + drift * ci)
            .collect()
    }
}

impl<T: Scalar> VelocityField<T> for LinearField<T> {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn provenance(&self) -> Provenance {
        Provenance::Synthetic
    }
    fn evaluate(&self, x: &[T], _t: T, out: &mut [T]) -> Result<()> {
        for ((o, &xi), &ci) in out.iter_mut().zip(x).zip(&self.offset) {
            *o = self.rate * xi + ci;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{Inversion, NoiseSchedule};
    use crate::target::{TargetDistribution, TargetScore};

    fn map() -> TimeMap<f64> {
        TimeMap::new(NoiseSchedule::default()).unwrap()
    }

    fn probe_points() -> Vec<Vec<f64>> {
        (0..40)
            .map(|i| {
                let a = i as f64 * 0.7;
                let r = 0.2 + 0.1 * i as f64;
                vec![r * a.cos(), r * a.sin()]
            })
            .collect()
    }

    fn probe_times(map: &TimeMap<f64>) -> Vec<f64> {
        let lo = map.start_time() + 1e-3;
        (0..25).map(|k| lo + (0.999 - lo) * k as f64 / 24.0).collect()
    }

    #[test]
    fn dirac_transform_is_the_exact_linear_field() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let map = map();
        let field =
            to_flow_velocity(TargetScore::new(&target, NoiseSchedule::default()), map.clone()).unwrap();
        for x in probe_points() {
            for t in probe_times(&map) {
                let v = field.velocity(&x, t).unwrap();
                for i in 0..2 {
                    let want = -x[i] / (1.0 - t);
                    assert!((v[i] - want).abs() <= 1e-9 * (1.0 + want.abs()), "t {t}");
                }
            }
        }
    }

    #[test]
    fn gaussian_transform_matches_closed_form() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let map = map();
        let field =
            to_flow_velocity(TargetScore::new(&target, NoiseSchedule::default()), map.clone()).unwrap();
        for x in probe_points() {
            for t in probe_times(&map) {
                let v = field.velocity(&x, t).unwrap();
                let k = (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t));
                for i in 0..2 {
                    assert!((v[i] - k * x[i]).abs() <= 1e-10 * (1.0 + (k * x[i]).abs()));
                }
            }
        }
    }

    #[test]
    fn mixture_transform_matches_analytic_velocity() {
        let target = TargetDistribution::mixture(
            vec![0.2, 0.5, 0.3],
            vec![vec![2.0, 0.0], vec![-1.0, 1.5], vec![-0.5, -2.0]],
            vec![
                vec![0.5, 0.1, 0.1, 0.3],
                vec![0.2, 0.0, 0.0, 0.6],
                vec![0.8, -0.3, -0.3, 0.4],
            ],
        )
        .unwrap();
        let map = map();
        let field =
            to_flow_velocity(TargetScore::new(&target, NoiseSchedule::default()), map.clone()).unwrap();
        let mut worst = 0.0f64;
        for x in probe_points() {
            for t in probe_times(&map) {
                let v = field.velocity(&x, t).unwrap();
                let want = target.fm_velocity(&x, t).unwrap();
                let num = ((v[0] - want[0]).powi(2) + (v[1] - want[1]).powi(2)).sqrt();
                let den = 1.0 + (want[0].powi(2) + want[1].powi(2)).sqrt();
                worst = worst.max(num / den);
            }
        }
        assert!(worst <= 1e-6, "worst {worst}");
    }

    #[test]
    fn frozen_branch() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let map = map();
        let t_min = map.start_time();
        let field = to_flow_velocity(TargetScore::new(&target, NoiseSchedule::default()), map).unwrap();
        let x = [0.8, -1.1];
        let half = field.velocity(&x, t_min / 2.0).unwrap();
        for i in 0..2 {
            assert!((half[i] + x[i] / (1.0 - t_min)).abs() < 1e-12);
        }
        for t in [0.0, t_min * 0.25, t_min * 0.999] {
            assert_eq!(field.velocity(&x, t).unwrap(), half);
        }
        // The literal branch has no 1/(1 − t) factor; for a Dirac at 0 it is −x.
        let verbatim = field.clone().with_frozen_rule(FrozenRule::Verbatim);
        let v = verbatim.velocity(&x, 0.0).unwrap();
        for i in 0..2 {
            assert!((v[i] + x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_and_schedule_checks() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let other = NoiseSchedule::vp_linear(0.1, 10.0, 1.0).unwrap();
        assert!(to_flow_velocity(TargetScore::new(&target, other), map()).is_err());
        let field = to_flow_velocity(TargetScore::new(&target, NoiseSchedule::default()), map()).unwrap();
        assert!(field.velocity(&[0.0, 0.0], 1.0).is_err());
        assert!(field.velocity(&[0.0, 0.0], -0.1).is_err());
        assert!(field
            .velocity(&[0.0, 0.0], 1.0 - 1e-9)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn one_score_query_per_evaluation() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let counted = Counted::new(TargetScore::new(&target, NoiseSchedule::default()));
        let field = to_flow_velocity(&counted, map()).unwrap();
        for (k, t) in [0.0, 0.3, 0.7, 0.99].into_iter().enumerate() {
            field.velocity(&[0.1, 0.2], t).unwrap();
            assert_eq!(counted.count(), k as u64 + 1);
        }
    }

    #[test]
    fn discrete_inversion_tracks_continuous() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let schedule = NoiseSchedule::default();
        let discrete =
            TimeMap::with_inversion(schedule.clone(), Inversion::Discrete { steps: 1000 }).unwrap();
        let field = to_flow_velocity(TargetScore::new(&target, schedule), discrete).unwrap();
        let x = [0.5, -0.4];
        for t in [0.2, 0.5, 0.8] {
            let v = field.velocity(&x, t).unwrap();
            let want = target.fm_velocity(&x, t).unwrap();
            assert!((v[0] - want[0]).abs() < 1e-2 && (v[1] - want[1]).abs() < 1e-2);
        }
    }

    /// A second schedule with the same σ/ᾱ curve but different (ᾱ, σ) yields
    /// the same velocity once the target is expressed in that schedule's terms:
    /// the transform only sees (ᾱ_τ, σ_τ) at the mapped τ.
    #[test]
    fn depends_on_schedule_only_through_mapped_coefficients() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let a = TimeMap::new(NoiseSchedule::default()).unwrap();
        let b = TimeMap::new(NoiseSchedule::vp_cosine(0.008, 0.99).unwrap()).unwrap();
        let fa = to_flow_velocity(TargetScore::new(&target, a.schedule().clone()), a.clone()).unwrap();
        let fb = to_flow_velocity(TargetScore::new(&target, b.schedule().clone()), b.clone()).unwrap();
        let lo = a.start_time().max(b.start_time()) + 1e-3;
        for k in 0..20 {
            let t = lo + (0.99 - lo) * k as f64 / 19.0;
            let va = fa.velocity(&[0.3, 1.2], t).unwrap();
            let vb = fb.velocity(&[0.3, 1.2], t).unwrap();
            assert!((va[0] - vb[0]).abs() < 1e-9 && (va[1] - vb[1]).abs() < 1e-9);
        }
    }

    struct TweedieNoise<'a>(&'a TargetDistribution<f64>, NoiseSchedule<f64>);

    impl NoisePredictor<f64> for TweedieNoise<'_> {
        fn predict_noise(&self, y: &[f64], tau: f64, out: &mut [f64]) -> Result<()> {
            let c = self.1.marginal_coeffs(tau)?;
            let m = self.0.posterior_mean(y, c.abar, c.sigma)?;
            for i in 0..y.len() {
                out[i] = (y[i] - c.abar * m[i]) / c.sigma;
            }
            Ok(())
        }
    }

    impl DataPredictor<f64> for TweedieNoise<'_> {
        fn predict_data(&self, y: &[f64], tau: f64, out: &mut [f64]) -> Result<()> {
            let c = self.1.marginal_coeffs(tau)?;
            out.copy_from_slice(&self.0.posterior_mean(y, c.abar, c.sigma)?);
            Ok(())
        }
    }

    #[test]
    fn prediction_adapters_reproduce_the_score() {
        let target = TargetDistribution::mixture(
            vec![0.5, 0.5],
            vec![vec![1.0, 1.0], vec![-1.0, 0.0]],
            vec![vec![0.3, 0.0, 0.0, 0.3]; 2],
        )
        .unwrap();
        let schedule = NoiseSchedule::default();
        let exact = TargetScore::new(&target, schedule.clone());
        let eps = FromNoise::new(TweedieNoise(&target, schedule.clone()), schedule.clone(), 2);
        let data = FromData::new(TweedieNoise(&target, schedule.clone()), schedule, 2);
        for tau in [0.05, 0.3, 0.9] {
            for y in probe_points().iter().take(10) {
                let mut want = [0.0; 2];
                let mut got_eps = [0.0; 2];
                let mut got_data = [0.0; 2];
                exact.score(y, tau, &mut want).unwrap();
                eps.score(y, tau, &mut got_eps).unwrap();
                data.score(y, tau, &mut got_data).unwrap();
                for i in 0..2 {
                    assert!((want[i] - got_eps[i]).abs() < 1e-8 * (1.0 + want[i].abs()));
                    assert!((want[i] - got_data[i]).abs() < 1e-8 * (1.0 + want[i].abs()));
                }
            }
        }
    }
}
