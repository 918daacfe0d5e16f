//! Integrators for the flow ODE `dx/dt = v(x, t)` on `t ∈ [0, 1]` and the
//! DDIM baseline on the diffusion side.
//!
//! The adaptive samplers split the velocity as `v = λ x + h` with a scalar
//! `λ` re-fitted every step from the last two velocities, integrate the
//! linear part exactly and the residual `h` with a second-order expansion
//! whose derivative comes from a backward difference. One field evaluation
//! per step.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{all_finite, dot, norm, norm_sq};
use crate::transform::{FlowVelocity, ScoreOracle, VelocityField, MAX_EVAL_TIME};
use crate::{Error, Result, Scalar};

/// End time of the RK4 reference trajectory.
pub const ORACLE_END_TIME: f64 = MAX_EVAL_TIME;

pub const MIN_ORACLE_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SamplerId {
    Ddim,
    EulerFm,
    HeunFm,
    Flops,
    Aflops,
    AEuler,
    Rk4Oracle,
}

impl SamplerId {
    pub const ALL: [SamplerId; 7] = [
        SamplerId::Ddim,
        SamplerId::EulerFm,
        SamplerId::HeunFm,
        SamplerId::Flops,
        SamplerId::Aflops,
        SamplerId::AEuler,
        SamplerId::Rk4Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerId::Ddim => "ddim",
            SamplerId::EulerFm => "euler-fm",
            SamplerId::HeunFm => "heun-fm",
            SamplerId::Flops => "flops",
            SamplerId::Aflops => "aflops",
            SamplerId::AEuler => "a-euler",
            SamplerId::Rk4Oracle => "rk4-oracle",
        }
    }

    /// Declared function evaluations for one chain.
    pub fn nfe(self, steps: usize, oracle_steps: usize) -> u64 {
        match self {
            SamplerId::HeunFm => 2 * steps as u64,
            SamplerId::Rk4Oracle => 4 * oracle_steps as u64,
            _ => steps as u64,
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, SamplerId::Aflops | SamplerId::AEuler)
    }

    /// Whether the sampler consumes the diffusion score (directly or transformed).
    pub fn uses_score(self) -> bool {
        matches!(self, SamplerId::Ddim | SamplerId::Flops | SamplerId::Aflops)
    }
}

impl fmt::Display for SamplerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown sampler id `{s}`")))
    }
}

/// Nodes `0 = t₀ < t₁ < … < t_N = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    nodes: Vec<T>,
    uniform: bool,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Grid("need at least one step".into()));
        }
        let n = T::from_usize(steps).unwrap();
        let mut nodes: Vec<T> = (0..steps).map(|k| T::from_usize(k).unwrap() / n).collect();
        nodes.push(T::one());
        Ok(Self { nodes, uniform: true })
    }

    /// A custom monotone grid (for ablations).
    pub fn from_nodes(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid("need at least two nodes".into()));
        }
        if nodes[0] != T::zero() || *nodes.last().unwrap() != T::one() {
            return Err(Error::Grid("grid must start at 0 and end at 1".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Grid("nodes must be strictly increasing".into()));
        }
        Ok(Self {
            nodes,
            uniform: false,
        })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    fn step(&self, n: usize) -> T {
        self.nodes[n + 1] - self.nodes[n]
    }
}

/// One sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRun<T> {
    pub sampler: SamplerId,
    pub seed: u64,
    /// `N + 1` states, first is the initial draw.
    pub states: Vec<Vec<T>>,
    /// The field value used at each step (score values for DDIM).
    pub velocities: Vec<Vec<T>>,
    /// `λ⁽ⁿ⁾` for steps 1..N of the adaptive samplers.
    pub lambdas: Vec<T>,
    pub nfe: u64,
}

impl<T: Scalar> SamplerRun<T> {
    fn start(sampler: SamplerId, x0: &[T], steps: usize) -> Self {
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0.to_vec());
        Self {
            sampler,
            seed: 0,
            states,
            velocities: Vec::with_capacity(steps),
            lambdas: Vec::new(),
            nfe: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn endpoint(&self) -> &[T] {
        self.states
            .last()
            .expect("a run holds at least the initial state")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoefficientMode {
    /// `a = Δt + λΔt²/2`, `b = Δt²/2`.
    #[default]
    Taylor2,
    /// `a = ∫₀^Δt e^{λu} du`, `b = ∫₀^Δt e^{λu}(Δt − u) du`.
    ExactIntegral,
    /// `a = (1 − e^{−λΔt})/λ`, `b = (1 − (1 + λΔt)e^{−λΔt})/λ²` as published.
    PaperEq12,
}

impl CoefficientMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoefficientMode::Taylor2 => "taylor2",
            CoefficientMode::ExactIntegral => "exact-integral",
            CoefficientMode::PaperEq12 => "paper-eq12",
        }
    }
}

impl fmt::Display for CoefficientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoefficientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taylor2" => Ok(Self::Taylor2),
            "exact-integral" => Ok(Self::ExactIntegral),
            "paper-eq12" => Ok(Self::PaperEq12),
            _ => Err(Error::Adaptive(format!("unknown coefficient mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig<T> {
    pub clamp: (T, T),
    pub coefficients: CoefficientMode,
    /// Below this squared step norm λ falls back to 0.
    pub degenerate_eps: T,
}

impl<T: Scalar> Default for AdaptiveConfig<T> {
    fn default() -> Self {
        Self {
            clamp: (-T::one(), T::one()),
            coefficients: CoefficientMode::Taylor2,
            degenerate_eps: T::lit(1e-12),
        }
    }
}

impl<T: Scalar> AdaptiveConfig<T> {
    pub fn new(clamp: (T, T), coefficients: CoefficientMode, degenerate_eps: T) -> Result<Self> {
        let cfg = Self {
            clamp,
            coefficients,
            degenerate_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_coefficients(mut self, coefficients: CoefficientMode) -> Self {
        self.coefficients = coefficients;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clamp.0 <= self.clamp.1) {
            return Err(Error::Adaptive(format!(
                "empty clamp interval [{}, {}]",
                self.clamp.0, self.clamp.1
            )));
        }
        if !(self.degenerate_eps > T::zero()) {
            return Err(Error::Adaptive(format!(
                "degenerate threshold must be positive, got {}",
                self.degenerate_eps
            )));
        }
        Ok(())
    }
}

/// Standard-normal initial state, deterministic per seed. Identical to the
/// first row of [`initial_batch`] with the same seed.
pub fn sample_init<T: Scalar>(dim: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| T::standard_normal(&mut rng)).collect()
}

/// `chains` standard-normal initial states drawn from one seeded stream.
pub fn initial_batch<T: Scalar>(chains: usize, dim: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((chains, dim), || T::standard_normal(&mut rng))
}

fn check_finite<T: Scalar>(x: &[T], step: usize, t: T) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            t: t.as_f64(),
            norm: norm(x).as_f64(),
        })
    }
}

fn check_dim<T: Scalar>(expected: usize, x: &[T]) -> Result<()> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected,
            got: x.len(),
        })
    }
}

fn euler_steps<T, F>(field: &F, grid: &TimeGrid<T>, x0: &[T], id: SamplerId) -> Result<SamplerRun<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    check_dim(field.dim(), x0)?;
    let mut run = SamplerRun::start(id, x0, grid.steps());
    let mut x = x0.to_vec();
    let mut v = vec![T::zero(); x.len()];
    for n in 0..grid.steps() {
        let t = grid.nodes[n];
        field.evaluate(&x, t, &mut v)?;
        run.nfe += 1;
        let dt = grid.step(n);
        for (xi, &vi) in x.iter_mut().zip(&v) {
            *xi = *xi + dt * vi;
        }
        check_finite(&x, n, t)?;
        run.velocities.push(v.clone());
        run.states.push(x.clone());
    }
    Ok(run)
}

/// Forward Euler on the grid.
pub fn euler_fm<T, F>(field: &F, grid: &TimeGrid<T>, x0: &[T]) -> Result<SamplerRun<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    euler_steps(field, grid, x0, SamplerId::EulerFm)
}

/// Euler on the transformed score, with the frozen branch below `t_min`.
pub fn flops<T, S>(field: &FlowVelocity<T, S>, grid: &TimeGrid<T>, x0: &[T]) -> Result<SamplerRun<T>>
where
    T: Scalar,
    S: ScoreOracle<T>,
{
    if !grid.is_uniform() {
        return Err(Error::Grid("flops runs on a uniform grid".into()));
    }
    euler_steps(field, grid, x0, SamplerId::Flops)
}

/// Least-squares slope `⟨Δv, Δx⟩/‖Δx‖²`, clamped; 0 when `‖Δx‖² < ε`.
pub fn estimate_lambda<T: Scalar>(dv: &[T], dx: &[T], cfg: &AdaptiveConfig<T>) -> T {
    let denom = norm_sq(dx);
    if !(denom >= cfg.degenerate_eps) {
        return T::zero();
    }
    let raw = dot(dv, dx) / denom;
    if raw.is_nan() {
        return T::zero();
    }
    raw.max(cfg.clamp.0).min(cfg.clamp.1)
}

/// Weights `(a, b)` of `h` and `dh/dt` in the exponential step.
pub fn ab_coefficients<T: Scalar>(lambda: T, dt: T, mode: CoefficientMode) -> (T, T) {
    let half = T::lit(0.5);
    let z = lambda * dt;
    if z.abs() < T::lit(1e-8) {
        return (dt, half * dt * dt);
    }
    match mode {
        CoefficientMode::Taylor2 => (dt + half * lambda * dt * dt, half * dt * dt),
        CoefficientMode::ExactIntegral => {
            let a = z.exp_m1() / lambda;
            let b = if z.abs() < T::lit(1e-3) {
                let c = [1.0 / 2.0, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0, 1.0 / 720.0];
                let series = c.iter().rev().fold(T::zero(), |acc, &ci| acc * z + T::lit(ci));
                dt * dt * series
            } else {
                (z.exp_m1() - z) / (lambda * lambda)
            };
            (a, b)
        }
        CoefficientMode::PaperEq12 => {
            let decay = (-z).exp();
            let a = -(-z).exp_m1() / lambda;
            let b = (T::one() - (T::one() + z) * decay) / (lambda * lambda);
            (a, b)
        }
    }
}

/// One adaptive step from `x_n` given the previous state/velocity pair on a
/// uniform grid. Returns `(x_{n+1}, λ)`.
pub fn adaptive_step<T: Scalar>(
    x_n: &[T],
    v_n: &[T],
    x_prev: &[T],
    v_prev: &[T],
    dt: T,
    cfg: &AdaptiveConfig<T>,
) -> Result<(Vec<T>, T)> {
    let mut next = vec![T::zero(); x_n.len()];
    let lambda = adaptive_update(x_n, v_n, x_prev, v_prev, dt, dt, cfg, &mut next);
    check_finite(&next, 0, T::zero())?;
    Ok((next, lambda))
}

#[allow(clippy::too_many_arguments)]
fn adaptive_update<T: Scalar>(
    x_n: &[T],
    v_n: &[T],
    x_prev: &[T],
    v_prev: &[T],
    dt: T,
    dt_back: T,
    cfg: &AdaptiveConfig<T>,
    next: &mut [T],
) -> T {
    let d = x_n.len();
    let mut dv = vec![T::zero(); d];
    let mut dx = vec![T::zero(); d];
    for i in 0..d {
        dv[i] = v_n[i] - v_prev[i];
        dx[i] = x_n[i] - x_prev[i];
    }
    let lambda = estimate_lambda(&dv, &dx, cfg);
    let (a, b) = ab_coefficients(lambda, dt, cfg.coefficients);
    let growth = (lambda * dt).exp();
    for i in 0..d {
        let h = v_n[i] - lambda * x_n[i];
        let h_prev = v_prev[i] - lambda * x_prev[i];
        let dh = (h - h_prev) / dt_back;
        next[i] = growth * x_n[i] + a * h + b * dh;
    }
    lambda
}

fn adaptive_steps<T, F>(
    field: &F,
    grid: &TimeGrid<T>,
    x0: &[T],
    cfg: &AdaptiveConfig<T>,
    id: SamplerId,
) -> Result<SamplerRun<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    cfg.validate()?;
    check_dim(field.dim(), x0)?;
    if grid.steps() < 2 {
        return Err(Error::Grid("adaptive samplers need at least two steps".into()));
    }
    let d = x0.len();
    let mut run = SamplerRun::start(id, x0, grid.steps());
    run.lambdas.reserve(grid.steps() - 1);
    let mut v = vec![T::zero(); d];
    let mut next = vec![T::zero(); d];
    for n in 0..grid.steps() {
        let t = grid.nodes[n];
        let x = &run.states[n];
        field.evaluate(x, t, &mut v)?;
        run.nfe += 1;
        let dt = grid.step(n);
        if n == 0 {
            for i in 0..d {
                next[i] = x[i] + dt * v[i];
            }
        } else {
            let lambda = adaptive_update(
                x,
                &v,
                &run.states[n - 1],
                &run.velocities[n - 1],
                dt,
                grid.step(n - 1),
                cfg,
                &mut next,
            );
            run.lambdas.push(lambda);
        }
        check_finite(&next, n, t)?;
        run.velocities.push(v.clone());
        run.states.push(next.clone());
    }
    Ok(run)
}

/// Adaptive exponential sampler on the transformed score: Euler first step,
/// then one adaptive step per remaining node.
pub fn aflops<T, S>(
    field: &FlowVelocity<T, S>,
    grid: &TimeGrid<T>,
    x0: &[T],
    cfg: &AdaptiveConfig<T>,
) -> Result<SamplerRun<T>>
where
    T: Scalar,
    S: ScoreOracle<T>,
{
    adaptive_steps(field, grid, x0, cfg, SamplerId::Aflops)
}

/// The adaptive mechanism applied to any velocity field.
pub fn a_euler<T, F>(
    field: &F,
    grid: &TimeGrid<T>,
    x0: &[T],
    cfg: &AdaptiveConfig<T>,
) -> Result<SamplerRun<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    adaptive_steps(field, grid, x0, cfg, SamplerId::AEuler)
}

/// Deterministic DDIM on a uniform τ grid from `T` down to 0, starting from
/// `x_T` (drawn as `N(0, σ_T² I)` by the caller).
pub fn ddim<T, S>(score: &S, steps: usize, x_t: &[T]) -> Result<SamplerRun<T>>
where
    T: Scalar,
    S: ScoreOracle<T> + ?Sized,
{
    if steps == 0 {
        return Err(Error::Grid("need at least one step".into()));
    }
    check_dim(score.dim(), x_t)?;
    let schedule = score.schedule();
    let horizon = schedule.horizon();
    let n = T::from_usize(steps).unwrap();
    let tau_at = |k: usize| {
        if k == 0 {
            horizon
        } else {
            horizon * T::from_usize(steps - k).unwrap() / n
        }
    };
    let d = x_t.len();
    let mut run = SamplerRun::start(SamplerId::Ddim, x_t, steps);
    let mut x = x_t.to_vec();
    let mut s = vec![T::zero(); d];
    for k in 0..steps {
        let tau = tau_at(k);
        let now = schedule.marginal_coeffs(tau)?;
        let next = schedule.marginal_coeffs(tau_at(k + 1))?;
        score.score(&x, tau, &mut s)?;
        run.nfe += 1;
        for i in 0..d {
            let x0_hat = (x[i] + now.sigma * now.sigma * s[i]) / now.abar;
            let eps_hat = (x[i] - now.abar * x0_hat) / now.sigma;
            x[i] = next.abar * x0_hat + next.sigma * eps_hat;
        }
        check_finite(&x, k, tau)?;
        run.velocities.push(s.clone());
        run.states.push(x.clone());
    }
    Ok(run)
}

/// Heun predictor-corrector; the corrector at `t = 1` is evaluated at
/// `1 − 10⁻⁶`. Two evaluations per step.
pub fn heun_fm<T, F>(field: &F, grid: &TimeGrid<T>, x0: &[T]) -> Result<SamplerRun<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    check_dim(field.dim(), x0)?;
    let d = x0.len();
    let cap = T::lit(MAX_EVAL_TIME);
    let half = T::lit(0.5);
    let mut run = SamplerRun::start(SamplerId::HeunFm, x0, grid.steps());
    let mut x = x0.to_vec();
    let mut v = vec![T::zero(); d];
    let mut v_end = vec![T::zero(); d];
    let mut predictor = vec![T::zero(); d];
    for n in 0..grid.steps() {
        let t = grid.nodes[n];
        let dt = grid.step(n);
        field.evaluate(&x, t, &mut v)?;
        for i in 0..d {
            predictor[i] = x[i] + dt * v[i];
        }
        field.evaluate(&predictor, grid.nodes[n + 1].min(cap), &mut v_end)?;
        run.nfe += 2;
        for i in 0..d {
            x[i] = x[i] + half * dt * (v[i] + v_end[i]);
        }
        check_finite(&x, n, t)?;
        run.velocities.push(v.clone());
        run.states.push(x.clone());
    }
    Ok(run)
}

/// Classic RK4 from `t0` to `t1` in `steps` equal steps.
pub fn rk4_integrate<T, F>(field: &F, x0: &[T], t0: T, t1: T, steps: usize) -> Result<Vec<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    check_dim(field.dim(), x0)?;
    let d = x0.len();
    let h = (t1 - t0) / T::from_usize(steps.max(1)).unwrap();
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let two = T::lit(2.0);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![T::zero(); d],
        vec![T::zero(); d],
        vec![T::zero(); d],
        vec![T::zero(); d],
    );
    let mut probe = vec![T::zero(); d];
    for n in 0..steps {
        let t = t0 + h * T::from_usize(n).unwrap();
        field.evaluate(&x, t, &mut k1)?;
        for i in 0..d {
            probe[i] = x[i] + half * h * k1[i];
        }
        field.evaluate(&probe, t + half * h, &mut k2)?;
        for i in 0..d {
            probe[i] = x[i] + half * h * k2[i];
        }
        field.evaluate(&probe, t + half * h, &mut k3)?;
        for i in 0..d {
            probe[i] = x[i] + h * k3[i];
        }
        field.evaluate(&probe, t + h, &mut k4)?;
        for i in 0..d {
            x[i] = x[i] + sixth * h * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        check_finite(&x, n, t)?;
    }
    Ok(x)
}

/// Reference endpoint at `t = 1 − 10⁻⁶` with `fine_steps ≥ 10⁴` RK4 steps.
pub fn rk4_oracle<T, F>(field: &F, x0: &[T], fine_steps: usize) -> Result<Vec<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    if fine_steps < MIN_ORACLE_STEPS {
        return Err(Error::domain(
            "fine_steps",
            fine_steps as f64,
            format!(">= {MIN_ORACLE_STEPS}"),
        ));
    }
    rk4_integrate(field, x0, T::zero(), T::lit(ORACLE_END_TIME), fine_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{NoiseSchedule, TimeMap};
    use crate::target::{AnalyticVelocity, TargetDistribution, TargetScore};
    use crate::transform::{to_flow_velocity, Counted, FrozenRule, LinearField};
    use proptest::prelude::*;

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn smooth_mixture() -> TargetDistribution<f64> {
        let angles = [90f64, 210.0, 330.0].map(f64::to_radians);
        TargetDistribution::mixture(
            vec![1.0 / 3.0; 3],
            angles
                .iter()
                .map(|a| vec![2.0 * a.cos(), 2.0 * a.sin()])
                .collect(),
            vec![vec![0.49, 0.0, 0.0, 0.49]; 3],
        )
        .unwrap()
    }

    #[test]
    fn init_determinism_and_moments() {
        assert_eq!(sample_init::<f64>(3, 9), sample_init::<f64>(3, 9));
        assert_eq!(
            sample_init::<f64>(3, 9),
            initial_batch::<f64>(4, 3, 9).row(0).to_vec()
        );
        let batch = initial_batch::<f64>(100_000, 2, 1);
        for col in batch.columns() {
            let mean = col.mean().unwrap();
            let var = col.var(1.0);
            assert!(mean.abs() < 0.013, "mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn grid_construction() {
        let g = TimeGrid::<f64>::uniform(4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::<f64>::uniform(0).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 1.0]).is_err());
        assert!(!TimeGrid::from_nodes(vec![0.0, 0.2, 1.0]).unwrap().is_uniform());
    }

    #[test]
    fn sampler_ids_round_trip() {
        for id in SamplerId::ALL {
            assert_eq!(id.as_str().parse::<SamplerId>().unwrap(), id);
        }
        assert!("dpm".parse::<SamplerId>().is_err());
        assert_eq!(SamplerId::HeunFm.nfe(5, 0), 10);
        assert_eq!(SamplerId::Aflops.nfe(5, 0), 5);
    }

    #[test]
    fn euler_is_exact_on_dirac_field() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let field = AnalyticVelocity::new(&target);
        let x0 = [1.3, -0.4];
        for n in [1, 2, 5, 13] {
            let run = euler_fm(&field, &TimeGrid::uniform(n).unwrap(), &x0).unwrap();
            for (k, s) in run.states.iter().enumerate() {
                let t = k as f64 / n as f64;
                assert!(dist(s, &[(1.0 - t) * x0[0], (1.0 - t) * x0[1]]) < 1e-14);
            }
            assert_eq!(run.nfe, n as u64);
            assert_eq!(run.states.len(), n + 1);
        }
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let c = vec![0.5, -2.0];
        let field = LinearField {
            rate: 0.0,
            offset: c.clone(),
        };
        let x0 = [1.0, 1.0];
        let grid = TimeGrid::uniform(7).unwrap();
        let want = [1.5, -1.0];
        let euler = euler_fm(&field, &grid, &x0).unwrap();
        let heun = heun_fm(&field, &grid, &x0).unwrap();
        let adaptive = a_euler(&field, &grid, &x0, &AdaptiveConfig::default()).unwrap();
        for run in [&euler, &heun, &adaptive] {
            assert!(dist(run.endpoint(), &want) < 1e-14);
        }
        assert!(adaptive.lambdas.iter().all(|&l| l == 0.0));
        for (a, b) in adaptive.states.iter().zip(&euler.states) {
            assert!(dist(a, b) < 1e-14);
        }
    }

    #[test]
    fn euler_first_order_on_gaussian() {
        // Richardson against the RK4 oracle endpoint, N = 10 and N = 10⁴.
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let field = AnalyticVelocity::new(&target);
        let x0 = [0.8, -1.2];
        let oracle = rk4_oracle(&field, &x0, 10_000).unwrap();
        let err = |n: usize| {
            dist(
                euler_fm(&field, &TimeGrid::uniform(n).unwrap(), &x0)
                    .unwrap()
                    .endpoint(),
                &oracle,
            )
        };
        let order = (err(10) / err(10_000)).ln() / (1000f64).ln();
        assert!((0.8..=1.2).contains(&order), "order {order}");
    }

    #[test]
    fn lambda_estimate_cases() {
        let cfg = AdaptiveConfig::<f64>::default();
        assert_eq!(estimate_lambda(&[2.0, 4.0], &[1.0, 2.0], &cfg), 1.0);
        assert_eq!(estimate_lambda(&[-6.0, 0.0], &[2.0, 0.0], &cfg), -1.0);
        assert_eq!(estimate_lambda(&[1.0, 0.0], &[0.0, 3.0], &cfg), 0.0);
        assert_eq!(estimate_lambda(&[1.0, 1.0], &[1e-7, 0.0], &cfg), 0.0);
        let wide = AdaptiveConfig::<f64>::new((-10.0, 10.0), CoefficientMode::Taylor2, 1e-12).unwrap();
        assert!((estimate_lambda(&[0.3, 0.6], &[1.0, 2.0], &wide) - 0.3).abs() < 1e-15);
    }

    /// Grid search over 10⁵ λ values in [−1, 1] is the oracle.
    #[test]
    fn lambda_matches_grid_search() {
        let cfg = AdaptiveConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let points = 100_000;
        let step = 2.0 / (points - 1) as f64;
        for _ in 0..100 {
            let dv: Vec<f64> = (0..3).map(|_| f64::standard_normal(&mut rng)).collect();
            let dx: Vec<f64> = (0..3).map(|_| f64::standard_normal(&mut rng)).collect();
            let closed = estimate_lambda(&dv, &dx, &cfg);
            let objective = |l: f64| dv.iter().zip(&dx).map(|(v, x)| (v - l * x).powi(2)).sum::<f64>();
            let best = (0..points)
                .map(|k| -1.0 + k as f64 * step)
                .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
                .unwrap();
            assert!((closed - best).abs() <= step, "closed {closed} grid {best}");
        }
    }

    #[test]
    fn coefficient_modes() {
        for mode in [
            CoefficientMode::Taylor2,
            CoefficientMode::ExactIntegral,
            CoefficientMode::PaperEq12,
        ] {
            let (a, b) = ab_coefficients(0.0f64, 0.2, mode);
            assert!((a - 0.2).abs() < 1e-15 && (b - 0.02).abs() < 1e-15);
            let (a, b) = ab_coefficients(1e-12f64, 0.2, mode);
            assert!((a - 0.2).abs() < 1e-15 && (b - 0.02).abs() < 1e-15);
        }
        let (a, b) = ab_coefficients(0.5f64, 0.2, CoefficientMode::Taylor2);
        assert!((a - 0.21).abs() < 1e-15 && (b - 0.02).abs() < 1e-15);
        let (a, b) = ab_coefficients(-0.3f64, 0.5, CoefficientMode::PaperEq12);
        let z: f64 = -0.15;
        assert!((a - (1.0 - (-z).exp()) / -0.3).abs() < 1e-15);
        assert!((b - (1.0 - (1.0 + z) * (-z).exp()) / 0.09).abs() < 1e-15);
    }

    /// Composite Simpson on ∫₀¹ e^u du and ∫₀¹ e^u (1 − u) du.
    #[test]
    fn exact_integral_coefficients_match_quadrature() {
        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
            let m = 2000;
            let h = (hi - lo) / m as f64;
            (0..m)
                .map(|i| {
                    let a = lo + i as f64 * h;
                    h / 6.0 * (f(a) + 4.0 * f(a + 0.5 * h) + f(a + h))
                })
                .sum::<f64>()
        };
        for (lambda, dt) in [(1.0, 1.0), (-0.7, 0.3), (2e-4, 0.5), (0.9, 0.01)] {
            let (a, b) = ab_coefficients(lambda, dt, CoefficientMode::ExactIntegral);
            let qa = simpson(&|u| (lambda * u).exp(), 0.0, dt);
            let qb = simpson(&|u| (lambda * u).exp() * (dt - u), 0.0, dt);
            assert!((a - qa).abs() < 1e-12 * (1.0 + qa.abs()), "a {a} vs {qa}");
            assert!((b - qb).abs() < 1e-12 * (1.0 + qb.abs()), "b {b} vs {qb}");
        }
        let (a, b) = ab_coefficients(1.0f64, 1.0, CoefficientMode::ExactIntegral);
        assert!((a - 1.718282).abs() < 1e-6 && (b - 0.718282).abs() < 1e-6);
    }

    #[test]
    fn adaptive_step_exact_on_linear_field() {
        let cfg = AdaptiveConfig::<f64>::default().with_coefficients(CoefficientMode::ExactIntegral);
        let field = LinearField {
            rate: -0.7,
            offset: vec![0.4, 1.1],
        };
        let dt = 0.125;
        let x_prev = vec![1.0, -2.0];
        let x_n = field.solution(&x_prev, 0.0, dt);
        let v = |x: &[f64]| field.velocity(x, 0.0).unwrap();
        let (next, lambda) = adaptive_step(&x_n, &v(&x_n), &x_prev, &v(&x_prev), dt, &cfg).unwrap();
        assert!((lambda + 0.7).abs() < 1e-12);
        assert!(dist(&next, &field.solution(&x_n, 0.0, dt)) < 1e-12);

        let steep = LinearField {
            rate: 5.0,
            offset: vec![0.0, 0.0],
        };
        let v = |x: &[f64]| steep.velocity(x, 0.0).unwrap();
        let x_n = vec![1.1, 0.9];
        let x_prev = vec![1.0, 0.8];
        let (_, lambda) = adaptive_step(&x_n, &v(&x_n), &x_prev, &v(&x_prev), dt, &cfg).unwrap();
        assert_eq!(lambda, 1.0);
    }

    #[test]
    fn a_euler_exact_on_linear_field_after_warm_up() {
        let cfg = AdaptiveConfig::<f64>::default().with_coefficients(CoefficientMode::ExactIntegral);
        for rate in [-1.0, -0.35, 0.0, 0.6, 1.0] {
            let field = LinearField {
                rate,
                offset: vec![0.3, -0.8],
            };
            let grid = TimeGrid::uniform(8).unwrap();
            let run = a_euler(&field, &grid, &[1.5, 0.2], &cfg).unwrap();
            for (k, s) in run.states.iter().enumerate().skip(1) {
                let want = field.solution(&run.states[1], grid.nodes()[1], grid.nodes()[k]);
                assert!(dist(s, &want) < 1e-12, "rate {rate} node {k}");
            }
            for &l in &run.lambdas {
                assert!((l - rate).abs() < 1e-12);
            }
        }
    }

    /// Local error of one adaptive step started from the oracle trajectory.
    #[test]
    fn adaptive_local_error_is_third_order() {
        let target = smooth_mixture();
        let field = AnalyticVelocity::new(&target);
        let x_start = [0.4, -0.9];
        let t_n = 0.5;
        let cfg = AdaptiveConfig::<f64>::default();
        let (mut hs, mut errs) = (vec![], vec![]);
        for n in [10usize, 20, 40, 80, 160] {
            let dt = 1.0 / n as f64;
            let x_prev = rk4_integrate(&field, &x_start, 0.2, t_n - dt, 4000).unwrap();
            let x_n = rk4_integrate(&field, &x_prev, t_n - dt, t_n, 200).unwrap();
            let exact = rk4_integrate(&field, &x_n, t_n, t_n + dt, 200).unwrap();
            let v_prev = field.velocity(&x_prev, t_n - dt).unwrap();
            let v_n = field.velocity(&x_n, t_n).unwrap();
            let (next, _) = adaptive_step(&x_n, &v_n, &x_prev, &v_prev, dt, &cfg).unwrap();
            hs.push(dt.ln());
            errs.push(dist(&next, &exact).ln());
        }
        let s = slope(&hs, &errs);
        assert!((s - 3.0).abs() <= 0.4, "slope {s}");
    }

    #[test]
    fn heun_local_error_on_linear_field() {
        let field = LinearField {
            rate: -0.8,
            offset: vec![0.5],
        };
        let (mut hs, mut errs) = (vec![], vec![]);
        for n in [10usize, 20, 40, 80, 160] {
            let dt = 1.0 / n as f64;
            let grid = TimeGrid::from_nodes(vec![0.0, dt, 1.0]).unwrap();
            let run = heun_fm(&field, &grid, &[1.0]).unwrap();
            let exact = field.solution(&[1.0], 0.0, dt);
            hs.push(dt.ln());
            errs.push((run.states[1][0] - exact[0]).abs().ln());
        }
        let s = slope(&hs, &errs);
        assert!((s - 3.0).abs() <= 0.4, "slope {s}");
    }

    #[test]
    fn global_orders_against_oracle() {
        let target = smooth_mixture();
        let field = AnalyticVelocity::new(&target);
        let chains = initial_batch::<f64>(16, 2, 5);
        let oracle: Vec<Vec<f64>> = chains
            .rows()
            .into_iter()
            .map(|x0| rk4_oracle(&field, x0.as_slice().unwrap(), 10_000).unwrap())
            .collect();
        let cfg = AdaptiveConfig::<f64>::default();
        let ladder = [10usize, 20, 40, 80, 160];
        let logs: Vec<f64> = ladder.iter().map(|&n| (1.0 / n as f64).ln()).collect();
        #[allow(clippy::type_complexity)]
        let errs = |f: &dyn Fn(&TimeGrid<f64>, &[f64]) -> SamplerRun<f64>| -> Vec<f64> {
            ladder
                .iter()
                .map(|&n| {
                    let grid = TimeGrid::uniform(n).unwrap();
                    let sq: f64 = chains
                        .rows()
                        .into_iter()
                        .zip(&oracle)
                        .map(|(x0, end)| dist(f(&grid, x0.as_slice().unwrap()).endpoint(), end).powi(2))
                        .sum();
                    (sq / 16.0).sqrt().ln()
                })
                .collect()
        };
        let euler = slope(&logs, &errs(&|g, x0| euler_fm(&field, g, x0).unwrap()));
        let adaptive = slope(&logs, &errs(&|g, x0| a_euler(&field, g, x0, &cfg).unwrap()));
        let heun = slope(&logs, &errs(&|g, x0| heun_fm(&field, g, x0).unwrap()));
        assert!((0.8..=1.2).contains(&euler), "euler {euler}");
        assert!((1.7..=2.3).contains(&adaptive), "adaptive {adaptive}");
        assert!((1.7..=2.3).contains(&heun), "heun {heun}");
    }

    #[test]
    fn rk4_oracle_checks() {
        let target = smooth_mixture();
        let field = AnalyticVelocity::new(&target);
        let x0 = [-0.5, 1.0];
        let a = rk4_oracle(&field, &x0, 10_000).unwrap();
        let b = rk4_oracle(&field, &x0, 20_000).unwrap();
        assert!(dist(&a, &b) <= 1e-9);
        assert!(rk4_oracle(&field, &x0, 100).is_err());

        let dirac = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let end = rk4_oracle(&AnalyticVelocity::new(&dirac), &x0, 10_000).unwrap();
        assert!(dist(&end, &[0.0, 0.0]) <= 1e-6 * dist(&x0, &[0.0, 0.0]) * 1.0001);

        let linear = LinearField {
            rate: 0.9,
            offset: vec![-0.2, 0.4],
        };
        let end = rk4_oracle(&linear, &x0, 10_000).unwrap();
        assert!(dist(&end, &linear.solution(&x0, 0.0, ORACLE_END_TIME)) < 1e-10);
    }

    fn dirac_field(target: &TargetDistribution<f64>) -> FlowVelocity<f64, TargetScore<'_, f64>> {
        let schedule = NoiseSchedule::default();
        to_flow_velocity(
            TargetScore::new(target, schedule.clone()),
            TimeMap::new(schedule).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn flops_on_dirac_reaches_the_point() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let field = dirac_field(&target);
        for n in 2..=10 {
            let run = flops(&field, &TimeGrid::uniform(n).unwrap(), &[0.9, -1.4]).unwrap();
            assert!(dist(run.endpoint(), &[0.0, 0.0]) < 1e-12, "n {n}");
        }
        // A single step lands at 0 only under the literal frozen rule.
        let verbatim = field.clone().with_frozen_rule(FrozenRule::Verbatim);
        let run = flops(&verbatim, &TimeGrid::uniform(1).unwrap(), &[0.9, -1.4]).unwrap();
        assert!(dist(run.endpoint(), &[0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn aflops_on_dirac_with_exact_first_step() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let field = dirac_field(&target).with_frozen_rule(FrozenRule::Verbatim);
        let cfg = AdaptiveConfig::default().with_coefficients(CoefficientMode::ExactIntegral);
        for n in 2..=10 {
            let run = aflops(&field, &TimeGrid::uniform(n).unwrap(), &[0.9, -1.4], &cfg).unwrap();
            assert!(dist(run.endpoint(), &[0.0, 0.0]) < 1e-12, "n {n}");
        }
    }

    #[test]
    fn flops_tracks_analytic_euler() {
        let target = smooth_mixture();
        let schedule = NoiseSchedule::default();
        let map = TimeMap::new(schedule.clone()).unwrap();
        let t_min = map.start_time();
        let field = to_flow_velocity(TargetScore::new(&target, schedule), map).unwrap();
        // The analytic field with the same frozen rule below t_min.
        struct FrozenAnalytic<'a>(AnalyticVelocity<'a, f64>, f64);
        impl VelocityField<f64> for FrozenAnalytic<'_> {
            fn dim(&self) -> usize {
                2
            }
            fn provenance(&self) -> crate::Provenance {
                crate::Provenance::AnalyticFm
            }
            fn evaluate(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
                self.0.evaluate(x, t.max(self.1), out)
            }
        }
        let analytic = FrozenAnalytic(AnalyticVelocity::new(&target), t_min);
        for n in [5, 10, 40] {
            let grid = TimeGrid::uniform(n).unwrap();
            let a = flops(&field, &grid, &[0.2, -1.0]).unwrap();
            let b = euler_fm(&analytic, &grid, &[0.2, -1.0]).unwrap();
            let c = euler_fm(&field, &grid, &[0.2, -1.0]).unwrap();
            for ((sa, sb), sc) in a.states.iter().zip(&b.states).zip(&c.states) {
                assert!(dist(sa, sb) < 1e-6);
                assert_eq!(sa, sc);
            }
        }
    }

    #[test]
    fn aflops_equals_a_euler_on_transformed_field() {
        let target = smooth_mixture();
        let schedule = NoiseSchedule::default();
        let field = to_flow_velocity(
            TargetScore::new(&target, schedule.clone()),
            TimeMap::new(schedule).unwrap(),
        )
        .unwrap();
        let grid = TimeGrid::uniform(6).unwrap();
        let cfg = AdaptiveConfig::default();
        let a = aflops(&field, &grid, &[1.0, 0.5], &cfg).unwrap();
        let b = a_euler(&field, &grid, &[1.0, 0.5], &cfg).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert!(dist(sa, sb) <= 1e-10);
        }
        assert_eq!(a.lambdas, b.lambdas);
        assert_eq!(a.sampler, SamplerId::Aflops);
        assert!(a.lambdas.iter().all(|l| (-1.0..=1.0).contains(l)));
        assert!(aflops(&field, &TimeGrid::uniform(1).unwrap(), &[1.0, 0.5], &cfg).is_err());
    }

    #[test]
    fn nfe_matches_counters() {
        let target = smooth_mixture();
        let schedule = NoiseSchedule::default();
        let score = Counted::new(TargetScore::new(&target, schedule.clone()));
        let field = to_flow_velocity(&score, TimeMap::new(schedule).unwrap()).unwrap();
        let analytic = Counted::new(AnalyticVelocity::new(&target));
        let cfg = AdaptiveConfig::default();
        let grid = TimeGrid::uniform(7).unwrap();
        let x0 = [0.1, 0.1];

        let before = score.count();
        assert_eq!(flops(&field, &grid, &x0).unwrap().nfe, score.count() - before);
        let before = score.count();
        assert_eq!(
            aflops(&field, &grid, &x0, &cfg).unwrap().nfe,
            score.count() - before
        );
        let before = score.count();
        assert_eq!(ddim(&score, 7, &x0).unwrap().nfe, score.count() - before);
        assert_eq!(score.count(), 21);

        assert_eq!(euler_fm(&analytic, &grid, &x0).unwrap().nfe, 7);
        assert_eq!(a_euler(&analytic, &grid, &x0, &cfg).unwrap().nfe, 7);
        assert_eq!(heun_fm(&analytic, &grid, &x0).unwrap().nfe, 14);
        assert_eq!(analytic.count(), 28);
    }

    #[test]
    fn ddim_on_dirac_lands_on_the_point() {
        let target = TargetDistribution::dirac(vec![0.0, 0.0]).unwrap();
        let score = TargetScore::new(&target, NoiseSchedule::default());
        for n in [1, 2, 5, 10] {
            let run = ddim(&score, n, &[0.7, -0.3]).unwrap();
            assert_eq!(run.states.len(), n + 1);
            assert!(dist(run.endpoint(), &[0.0, 0.0]) < 1e-15);
        }
    }

    #[test]
    fn ddim_many_steps_recovers_gaussian() {
        let target = TargetDistribution::<f64>::standard_gaussian(2).unwrap();
        let schedule = NoiseSchedule::default();
        let sigma_t = schedule.marginal_coeffs(1.0).unwrap().sigma;
        let score = TargetScore::new(&target, schedule);
        let batch = initial_batch::<f64>(10_000, 2, 3);
        let mut ends = Array2::<f64>::zeros((10_000, 2));
        for (i, row) in batch.rows().into_iter().enumerate() {
            let x_t: Vec<f64> = row.iter().map(|v| sigma_t * v).collect();
            let run = ddim(&score, 1000, &x_t).unwrap();
            ends.row_mut(i).assign(&ndarray::ArrayView1::from(run.endpoint()));
        }
        let mean = ends.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = &ends - &mean;
        let cov = centered.t().dot(&centered) / 9_999.0;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[[i, j]] - want).abs() <= 0.05,
                    "cov[{i},{j}] = {}",
                    cov[[i, j]]
                );
            }
        }
    }

    #[test]
    fn non_finite_states_abort_with_diagnostics() {
        let field = LinearField {
            rate: 0.0,
            offset: vec![f64::INFINITY],
        };
        let err = euler_fm(&field, &TimeGrid::uniform(3).unwrap(), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(AdaptiveConfig::new((1.0, -1.0), CoefficientMode::Taylor2, 1e-12).is_err());
        assert!(AdaptiveConfig::new((-1.0, 1.0), CoefficientMode::Taylor2, 0.0).is_err());
        assert_eq!(
            "paper-eq12".parse::<CoefficientMode>().unwrap(),
            CoefficientMode::PaperEq12
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let target = smooth_mixture();
        let field = AnalyticVelocity::new(&target);
        let grid = TimeGrid::uniform(9).unwrap();
        let x0 = sample_init::<f64>(2, 77);
        let cfg = AdaptiveConfig::default();
        assert_eq!(
            a_euler(&field, &grid, &x0, &cfg).unwrap(),
            a_euler(&field, &grid, &x0, &cfg).unwrap()
        );
    }

    proptest! {
        #[test]
        fn lambdas_stay_in_clamp(seed in 0u64..500, n in 2usize..12, lo in -2.0f64..0.0, hi in 0.0f64..2.0) {
            let target = smooth_mixture();
            let field = AnalyticVelocity::new(&target);
            let cfg = AdaptiveConfig::new((lo, hi), CoefficientMode::Taylor2, 1e-12).unwrap();
            let run = a_euler(&field, &TimeGrid::uniform(n).unwrap(), &sample_init(2, seed), &cfg).unwrap();
            prop_assert_eq!(run.lambdas.len(), n - 1);
            prop_assert!(run.lambdas.iter().all(|l| *l >= lo && *l <= hi));
        }

        #[test]
        fn linear_field_exactness(rate in -1.0f64..1.0, c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, n in 2usize..16) {
            let cfg = AdaptiveConfig::default().with_coefficients(CoefficientMode::ExactIntegral);
            let field = LinearField { rate, offset: vec![c0, c1] };
            let grid = TimeGrid::uniform(n).unwrap();
            let run = a_euler(&field, &grid, &[0.5, -0.5], &cfg).unwrap();
            for k in 2..=n {
                let want = field.solution(&run.states[1], grid.nodes()[1], grid.nodes()[k]);
                prop_assert!(dist(&run.states[k], &want) < 1e-12);
            }
        }
    }
}
