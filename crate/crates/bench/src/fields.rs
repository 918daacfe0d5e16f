//! The velocity or score field each sampler integrates, with evaluation
//! counting.

use flowpath_core::sampler::{self, TimeGrid};
use flowpath_core::{
    to_flow_velocity, AnalyticVelocity, Counted, FlowVelocity, SamplerId, TargetDistribution, TargetScore,
};

use crate::config::Experiment;

pub(crate) enum Field<'a> {
    Analytic(Counted<AnalyticVelocity<'a, f64>>),
    Transformed(FlowVelocity<f64, Counted<TargetScore<'a, f64>>>),
    Score(Counted<TargetScore<'a, f64>>),
}

impl<'a> Field<'a> {
    pub(crate) fn for_sampler(
        exp: &Experiment,
        target: &'a TargetDistribution<f64>,
        id: SamplerId,
    ) -> flowpath_core::Result<Self> {
        let score = || Counted::new(TargetScore::new(target, exp.schedule.clone()));
        Ok(match id {
            SamplerId::Ddim => Field::Score(score()),
            SamplerId::Flops | SamplerId::Aflops => Field::Transformed(
                to_flow_velocity(score(), exp.map.clone())?.with_frozen_rule(exp.frozen_rule()),
            ),
            SamplerId::EulerFm | SamplerId::HeunFm | SamplerId::AEuler | SamplerId::Rk4Oracle => {
                Field::Analytic(Counted::new(AnalyticVelocity::new(target)))
            }
        })
    }

    pub(crate) fn count(&self) -> u64 {
        match self {
            Field::Analytic(f) => f.count(),
            Field::Transformed(f) => f.score_oracle().count(),
            Field::Score(s) => s.count(),
        }
    }

    /// Endpoint of one chain started from the standard-normal draw `x0`.
    pub(crate) fn integrate(
        &self,
        exp: &Experiment,
        id: SamplerId,
        grid: &TimeGrid<f64>,
        x0: &[f64],
    ) -> flowpath_core::Result<Vec<f64>> {
        let run = match (self, id) {
            (Field::Score(score), SamplerId::Ddim) => {
                let sigma_t = exp.map.terminal_coeffs().sigma;
                let x_t: Vec<f64> = x0.iter().map(|v| sigma_t * v).collect();
                sampler::ddim(score, grid.steps(), &x_t)?
            }
            (Field::Transformed(f), SamplerId::Flops) => sampler::flops(f, grid, x0)?,
            (Field::Transformed(f), SamplerId::Aflops) => {
                sampler::aflops(f, grid, x0, &exp.adaptive_config(id))?
            }
            (Field::Analytic(f), SamplerId::EulerFm) => sampler::euler_fm(f, grid, x0)?,
            (Field::Analytic(f), SamplerId::HeunFm) => sampler::heun_fm(f, grid, x0)?,
            (Field::Analytic(f), SamplerId::AEuler) => {
                sampler::a_euler(f, grid, x0, &exp.adaptive_config(id))?
            }
            (Field::Analytic(f), SamplerId::Rk4Oracle) => {
                return sampler::rk4_oracle(f, x0, exp.config.oracle_fine_steps)
            }
            _ => unreachable!("field built for a different sampler"),
        };
        Ok(run.endpoint().to_vec())
    }

    /// RK4 reference endpoint on the same field, or `None` for the score
    /// (DDIM runs on the diffusion clock and has no flow-time reference).
    /// These evaluations bypass the counter.
    pub(crate) fn oracle(&self, x0: &[f64], fine_steps: usize) -> Option<flowpath_core::Result<Vec<f64>>> {
        match self {
            Field::Analytic(f) => Some(sampler::rk4_oracle(f.inner(), x0, fine_steps)),
            Field::Transformed(f) => {
                let plain = to_flow_velocity(f.score_oracle().inner(), f.map().clone())
                    .map(|v| v.with_frozen_rule(f.frozen_rule()));
                Some(plain.and_then(|v| sampler::rk4_oracle(&v, x0, fine_steps)))
            }
            Field::Score(_) => None,
        }
    }
}
