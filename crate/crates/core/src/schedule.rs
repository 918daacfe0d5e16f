//! Noise schedules, their marginal coefficients, and the correspondence
//! between diffusion time τ and flow time t.
//!
//! A schedule perturbs data as `x_τ | x_0 ~ N(ᾱ_τ x_0, σ_τ² I)`. The flow
//! time attached to τ is `t = 1 / (1 + σ_τ/ᾱ_τ)`, which runs from 1 at τ = 0
//! down to the start time `t_min` at the horizon.

use std::f64::consts::FRAC_PI_2;

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind<T> {
    /// Variance-preserving schedule with `β(τ) = β_min + (β_max − β_min) τ/T`
    /// and drift `β/2`.
    VpLinear { beta_min: T, beta_max: T },
    /// Variance-preserving cosine schedule `ᾱ_τ = cos(π/2 (τ+s)/(1+s)) / cos(π/2 s/(1+s))`.
    /// The horizon must stay below 1 so that `ᾱ_T > 0`.
    VpCosine { offset: T },
    /// Drift `α(τ)` and diffusion `β(τ)` given as polynomial coefficients in
    /// τ (ascending powers); the marginal integrals are evaluated by composite
    /// Simpson quadrature with `panels` panels.
    GenericQuadrature {
        drift: Vec<T>,
        diffusion: Vec<T>,
        panels: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    kind: ScheduleKind<T>,
    horizon: T,
}

/// The pair `(ᾱ_τ, σ_τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalCoeffs<T> {
    pub abar: T,
    pub sigma: T,
}

impl<T: Scalar> MarginalCoeffs<T> {
    /// `σ/ᾱ`, the inverse signal-to-noise ratio.
    pub fn snr_ratio(&self) -> T {
        self.sigma / self.abar
    }

    /// `1 / (1 + σ/ᾱ)`, written as `ᾱ/(ᾱ+σ)` so that σ = 0 gives exactly 1.
    pub fn flow_time(&self) -> T {
        self.abar / (self.abar + self.sigma)
    }

    /// `1 − t = σ/(ᾱ+σ)` without cancellation near t = 1.
    pub fn one_minus_flow_time(&self) -> T {
        self.sigma / (self.abar + self.sigma)
    }
}

pub const DEFAULT_PANELS: usize = 4096;

fn poly<T: Scalar>(coeffs: &[T], x: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        Self::vp_linear(T::lit(0.1), T::lit(20.0), T::one()).expect("default schedule is valid")
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn vp_linear(beta_min: T, beta_max: T, horizon: T) -> Result<Self> {
        if !(beta_min >= T::zero()) || !(beta_max >= T::zero()) {
            return Err(Error::Schedule(format!(
                "vp-linear needs non-negative betas, got ({beta_min}, {beta_max})"
            )));
        }
        Self::new(ScheduleKind::VpLinear { beta_min, beta_max }, horizon)
    }

    pub fn vp_cosine(offset: T, horizon: T) -> Result<Self> {
        if !(offset >= T::zero()) {
            return Err(Error::Schedule(format!(
                "vp-cosine offset must be non-negative, got {offset}"
            )));
        }
        if !(horizon < T::one()) {
            return Err(Error::Schedule(format!(
                "vp-cosine horizon must be < 1 so that the signal coefficient stays positive, got {horizon}"
            )));
        }
        Self::new(ScheduleKind::VpCosine { offset }, horizon)
    }

    pub fn generic(drift: Vec<T>, diffusion: Vec<T>, horizon: T, panels: usize) -> Result<Self> {
        if drift.is_empty() || diffusion.is_empty() {
            return Err(Error::Schedule(
                "generic schedule needs drift and diffusion coefficients".into(),
            ));
        }
        if panels == 0 {
            return Err(Error::Schedule("quadrature resolution must be positive".into()));
        }
        Self::new(
            ScheduleKind::GenericQuadrature {
                drift,
                diffusion,
                panels,
            },
            horizon,
        )
    }

    fn new(kind: ScheduleKind<T>, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::Schedule(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { kind, horizon })
    }

    pub fn kind(&self) -> &ScheduleKind<T> {
        &self.kind
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn is_variance_preserving(&self) -> bool {
        matches!(
            self.kind,
            ScheduleKind::VpLinear { .. } | ScheduleKind::VpCosine { .. }
        )
    }

    /// `(ᾱ_τ, σ_τ)` for `τ ∈ [0, T]`.
    pub fn marginal_coeffs(&self, tau: T) -> Result<MarginalCoeffs<T>> {
        if !(tau >= T::zero() && tau <= self.horizon) {
            return Err(Error::domain(
                "tau",
                tau.as_f64(),
                format!("[0, {}]", self.horizon),
            ));
        }
        Ok(self.coeffs_unchecked(tau))
    }

    pub fn snr_ratio(&self, tau: T) -> Result<T> {
        Ok(self.marginal_coeffs(tau)?.snr_ratio())
    }

    fn coeffs_unchecked(&self, tau: T) -> MarginalCoeffs<T> {
        let half = T::lit(0.5);
        match &self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                let integral = *beta_min * tau + (*beta_max - *beta_min) * tau * tau * half / self.horizon;
                MarginalCoeffs {
                    abar: (-half * integral).exp(),
                    sigma: (-(-integral).exp_m1()).sqrt(),
                }
            }
            ScheduleKind::VpCosine { offset } => {
                let quarter_turn = T::lit(FRAC_PI_2);
                let one_plus = T::one() + *offset;
                let a0 = quarter_turn * *offset / one_plus;
                let a = quarter_turn * (tau + *offset) / one_plus;
                let abar = a.cos() / a0.cos();
                // 1 − ᾱ = (cos a0 − cos a)/cos a0, expanded to avoid cancellation near τ = 0.
                let one_minus = T::lit(2.0) * ((a + a0) * half).sin() * ((a - a0) * half).sin() / a0.cos();
                MarginalCoeffs {
                    abar,
                    sigma: (one_minus * (T::one() + abar)).max(T::zero()).sqrt(),
                }
            }
            ScheduleKind::GenericQuadrature {
                drift,
                diffusion,
                panels,
            } => quadrature_coeffs(drift, diffusion, *panels, tau),
        }
    }
}

/// `ᾱ_τ = exp(−∫₀^τ α)` and `σ_τ² = ∫₀^τ exp(−2∫_s^τ α) β(s) ds` by composite
/// Simpson. The inner integral is accumulated node by node, each increment
/// being a Simpson rule over one sub-interval.
fn quadrature_coeffs<T: Scalar>(drift: &[T], diffusion: &[T], panels: usize, tau: T) -> MarginalCoeffs<T> {
    if tau == T::zero() {
        return MarginalCoeffs {
            abar: T::one(),
            sigma: T::zero(),
        };
    }
    let nodes = 2 * panels;
    let h = tau / T::from_usize(nodes).unwrap();
    let sixth = T::one() / T::lit(6.0);
    let half = T::lit(0.5);
    let mut cumulative = Vec::with_capacity(nodes + 1);
    cumulative.push(T::zero());
    let mut acc = T::zero();
    let mut left = poly(drift, T::zero());
    for j in 1..=nodes {
        let s0 = h * T::from_usize(j - 1).unwrap();
        let s1 = h * T::from_usize(j).unwrap();
        let mid = poly(drift, (s0 + s1) * half);
        let right = poly(drift, s1);
        acc = acc + h * sixth * (left + T::lit(4.0) * mid + right);
        cumulative.push(acc);
        left = right;
    }
    let drift_integral = cumulative[nodes];
    let weight = |j: usize| {
        let s = h * T::from_usize(j).unwrap();
        poly(diffusion, s) * (T::lit(-2.0) * (drift_integral - cumulative[j])).exp()
    };
    let mut simpson = weight(0) + weight(nodes);
    for j in 1..nodes {
        let c = if j % 2 == 1 { T::lit(4.0) } else { T::lit(2.0) };
        simpson = simpson + c * weight(j);
    }
    let variance = simpson * h / T::lit(3.0);
    MarginalCoeffs {
        abar: (-drift_integral).exp(),
        sigma: variance.max(T::zero()).sqrt(),
    }
}

/// How [`TimeMap::diffusion_time`] inverts the flow-time map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Inversion {
    /// Bisection to machine precision.
    #[default]
    Continuous,
    /// Nearest of the `steps + 1` grid points `τ_j = jT/steps`; ties go to
    /// the larger τ.
    Discrete { steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMap<T> {
    schedule: NoiseSchedule<T>,
    start: T,
    terminal: MarginalCoeffs<T>,
    inversion: Inversion,
}

impl<T: Scalar> TimeMap<T> {
    pub fn new(schedule: NoiseSchedule<T>) -> Result<Self> {
        Self::with_inversion(schedule, Inversion::Continuous)
    }

    /// Validates that `σ_τ/ᾱ_τ` is strictly increasing (checked on a 257-point
    /// grid) with `ᾱ_T > 0` and `σ_T > 0`; the map is a bijection only then.
    pub fn with_inversion(schedule: NoiseSchedule<T>, inversion: Inversion) -> Result<Self> {
        if let Inversion::Discrete { steps } = inversion {
            if steps == 0 {
                return Err(Error::Schedule(
                    "discrete inversion needs at least one step".into(),
                ));
            }
        }
        let horizon = schedule.horizon();
        let terminal = schedule.marginal_coeffs(horizon)?;
        if !(terminal.abar > T::zero()) || !(terminal.sigma > T::zero()) {
            return Err(Error::Schedule(format!(
                "need 0 < abar_T and 0 < sigma_T, got ({}, {})",
                terminal.abar, terminal.sigma
            )));
        }
        let probes = 256;
        let mut previous = T::zero();
        for k in 1..=probes {
            let tau = horizon * T::from_usize(k).unwrap() / T::from_usize(probes).unwrap();
            let ratio = schedule.marginal_coeffs(tau)?.snr_ratio();
            if !(ratio > previous) {
                return Err(Error::Schedule(format!(
                    "sigma/abar is not strictly increasing near tau = {tau}"
                )));
            }
            previous = ratio;
        }
        Ok(Self {
            start: terminal.flow_time(),
            schedule,
            terminal,
            inversion,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn inversion(&self) -> Inversion {
        self.inversion
    }

    /// `t_min = 1/(1 + σ_T/ᾱ_T)`.
    pub fn start_time(&self) -> T {
        self.start
    }

    pub fn terminal_coeffs(&self) -> MarginalCoeffs<T> {
        self.terminal
    }

    /// Below the start time the flow velocity is not defined through the
    /// schedule and samplers use the frozen value instead.
    pub fn is_frozen(&self, t: T) -> bool {
        t < self.start
    }

    pub fn flow_time(&self, tau: T) -> Result<T> {
        if tau == T::zero() {
            return Ok(T::one());
        }
        Ok(self.schedule.marginal_coeffs(tau)?.flow_time())
    }

    /// Inverse of [`flow_time`](Self::flow_time) on `[t_min, 1]`.
    pub fn diffusion_time(&self, t: T) -> Result<T> {
        if !(t >= self.start && t <= T::one()) {
            return Err(Error::domain("t", t.as_f64(), format!("[{}, 1]", self.start)));
        }
        match self.inversion {
            Inversion::Continuous => Ok(self.bisect(t)),
            Inversion::Discrete { steps } => {
                let j = self.nearest_index(t, steps);
                Ok(self.grid_tau(j, steps))
            }
        }
    }

    /// Grid index chosen by the discrete inversion for `t`.
    pub fn discrete_index(&self, t: T, steps: usize) -> Result<usize> {
        if !(t >= self.start && t <= T::one()) || steps == 0 {
            return Err(Error::domain("t", t.as_f64(), format!("[{}, 1]", self.start)));
        }
        Ok(self.nearest_index(t, steps))
    }

    fn grid_tau(&self, j: usize, steps: usize) -> T {
        if j == steps {
            return self.schedule.horizon();
        }
        self.schedule.horizon() * T::from_usize(j).unwrap() / T::from_usize(steps).unwrap()
    }

    fn image(&self, tau: T) -> T {
        if tau == T::zero() {
            T::one()
        } else {
            self.schedule.coeffs_unchecked(tau).flow_time()
        }
    }

    fn bisect(&self, t: T) -> T {
        let horizon = self.schedule.horizon();
        if t == T::one() {
            return T::zero();
        }
        if t == self.start {
            return horizon;
        }
        let (mut lo, mut hi) = (T::zero(), horizon);
        let two = T::lit(2.0);
        for _ in 0..1200 {
            let mid = lo + (hi - lo) / two;
            if mid <= lo || mid >= hi {
                break;
            }
            if self.image(mid) > t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (self.image(lo) - t).abs() < (self.image(hi) - t).abs() {
            lo
        } else {
            hi
        }
    }

    fn nearest_index(&self, t: T, steps: usize) -> usize {
        // Images decrease with j; find the first j whose image is <= t.
        let (mut lo, mut hi) = (0usize, steps);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.image(self.grid_tau(mid, steps)) <= t {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if lo == 0 {
            return 0;
        }
        let below = t - self.image(self.grid_tau(lo, steps));
        let above = self.image(self.grid_tau(lo - 1, steps)) - t;
        if below <= above {
            lo
        } else {
            lo - 1
        }
    }
}
