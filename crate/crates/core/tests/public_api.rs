use flowpath_core::metrics::{moment_errors, sliced_w2};
use flowpath_core::sampler::{aflops, flops, initial_batch, TimeGrid};
use flowpath_core::{
    to_flow_velocity, AdaptiveConfigF64, NoiseScheduleF32, NoiseScheduleF64, TargetF32, TargetF64,
    TargetScore, TimeMapF32, TimeMapF64, VelocityField,
};
use ndarray::Array2;

fn gaussian() -> TargetF64 {
    TargetF64::gaussian(vec![1.0, -1.0], vec![2.0, 0.6, 0.6, 0.5]).unwrap()
}

#[test]
fn aflops_beats_flops_at_five_steps() {
    let target = gaussian();
    let schedule = NoiseScheduleF64::default();
    let map = TimeMapF64::new(schedule.clone()).unwrap();
    let field = to_flow_velocity(TargetScore::new(&target, schedule), map).unwrap();
    let grid = TimeGrid::uniform(5).unwrap();
    let x0 = initial_batch::<f64>(2000, 2, 11);
    let cfg = AdaptiveConfigF64::default();

    let mut plain = Array2::zeros((2000, 2));
    let mut adaptive = Array2::zeros((2000, 2));
    for (i, row) in x0.rows().into_iter().enumerate() {
        let x = row.to_vec();
        plain
            .row_mut(i)
            .assign(&ndarray::arr1(flops(&field, &grid, &x).unwrap().endpoint()));
        adaptive.row_mut(i).assign(&ndarray::arr1(
            aflops(&field, &grid, &x, &cfg).unwrap().endpoint(),
        ));
    }
    let exact = target.sample_exact(2000, 5).unwrap();
    let w_plain = sliced_w2(plain.view(), exact.view(), 64, 1).unwrap();
    let w_adaptive = sliced_w2(adaptive.view(), exact.view(), 64, 1).unwrap();
    assert!(w_adaptive < w_plain, "{w_adaptive} vs {w_plain}");

    let (mean_err, cov_err) = moment_errors(adaptive.view(), &target).unwrap();
    assert!(mean_err < 0.1 && cov_err < 0.3, "{mean_err} {cov_err}");
}

#[test]
fn single_precision_transform_tracks_double() {
    let t64 = gaussian();
    let t32 = TargetF32::gaussian(vec![1.0, -1.0], vec![2.0, 0.6, 0.6, 0.5]).unwrap();
    let s64 = NoiseScheduleF64::default();
    let s32 = NoiseScheduleF32::default();
    let f64_field =
        to_flow_velocity(TargetScore::new(&t64, s64.clone()), TimeMapF64::new(s64).unwrap()).unwrap();
    let f32_field =
        to_flow_velocity(TargetScore::new(&t32, s32.clone()), TimeMapF32::new(s32).unwrap()).unwrap();
    for t in [0.1, 0.4, 0.7, 0.9] {
        let x = [0.3, -0.8];
        let a = f64_field.velocity(&x, t).unwrap();
        let b = f32_field.velocity(&[0.3f32, -0.8], t as f32).unwrap();
        for i in 0..2 {
            assert!(
                (a[i] - b[i] as f64).abs() <= 1e-4 * (1.0 + a[i].abs()),
                "t {t}: {a:?} {b:?}"
            );
        }
    }
}
