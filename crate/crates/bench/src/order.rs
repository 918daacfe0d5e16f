use std::collections::BTreeMap;
use std::time::Instant;

use flowpath_core::metrics::{endpoint_rmse, order_estimate};
use flowpath_core::sampler::{initial_batch, TimeGrid};
use flowpath_core::SamplerId;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::config::{Experiment, ExperimentConfig};
use crate::fields::Field;
use crate::manifest::{CellRecord, CellStatus, ReportRecord, RunKind, RunManifest, SlopeRecord};
use crate::seeds::{hash_f64s, stream_seed};
use crate::sweep::{pool, prepare_output};
use crate::{BenchError, Result};

pub const ORDER_CSV: &str = "order.csv";
pub const ORDER_MANIFEST: &str = "order_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum FieldKind {
    Analytic,
    Transformed,
}

fn kind_of(id: SamplerId) -> FieldKind {
    if id.uses_score() {
        FieldKind::Transformed
    } else {
        FieldKind::Analytic
    }
}

/// Endpoint RMSE against the RK4 reference for every N of the ladder, and
/// the fitted slope of log RMSE against log Δt per (target, sampler).
pub fn run_order_study(config: &ExperimentConfig) -> Result<RunManifest> {
    let exp = Experiment::new(config.clone())?;
    let out = config.output_dir.clone();
    prepare_output(&out)?;
    let pool = pool(config)?;
    let order = &config.order;

    let targets: Vec<usize> = exp
        .targets
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| order.targets.is_empty() || order.targets.contains(name))
        .map(|(i, _)| i)
        .collect();
    let batches: BTreeMap<usize, Array2<f64>> = targets
        .iter()
        .map(|&t| {
            let (name, target) = &exp.targets[t];
            (
                t,
                initial_batch(
                    order.chains,
                    target.dim(),
                    stream_seed(order.seed, name, "order-x0"),
                ),
            )
        })
        .collect();

    let mut oracle_jobs = Vec::new();
    for &t in &targets {
        let mut kinds: Vec<FieldKind> = order.samplers.iter().map(|&s| kind_of(s)).collect();
        kinds.sort();
        kinds.dedup();
        for kind in kinds {
            oracle_jobs.push((t, kind));
        }
    }
    let mut jobs = Vec::new();
    for &t in &targets {
        for &sampler in &order.samplers {
            for &steps in &order.steps {
                jobs.push((t, sampler, steps));
            }
        }
    }

    let cells = pool.install(|| {
        let oracles: BTreeMap<(usize, FieldKind), Array2<f64>> = oracle_jobs
            .par_iter()
            .map(|&(t, kind)| {
                let representative = match kind {
                    FieldKind::Analytic => SamplerId::EulerFm,
                    FieldKind::Transformed => SamplerId::Flops,
                };
                let field = Field::for_sampler(&exp, &exp.targets[t].1, representative)?;
                let x0 = &batches[&t];
                let ends: Vec<Vec<f64>> = x0
                    .rows()
                    .into_iter()
                    .collect::<Vec<_>>()
                    .par_iter()
                    .map(|row| {
                        field
                            .oracle(row.as_slice().unwrap(), config.oracle_fine_steps)
                            .expect("flow-time field")
                    })
                    .collect::<flowpath_core::Result<_>>()?;
                let mut arr = Array2::zeros(x0.dim());
                for (i, e) in ends.iter().enumerate() {
                    arr.row_mut(i).assign(&ArrayView1::from(e));
                }
                Ok(((t, kind), arr))
            })
            .collect::<Result<_>>()?;
        let cells: Vec<CellRecord> = jobs
            .par_iter()
            .map(|&(t, sampler, steps)| {
                order_cell(
                    &exp,
                    t,
                    sampler,
                    steps,
                    &batches[&t],
                    &oracles[&(t, kind_of(sampler))],
                )
            })
            .collect();
        Ok::<_, BenchError>(cells)
    })?;

    let mut manifest = RunManifest::new(RunKind::OrderStudy, config, ORDER_CSV);
    let csv_path = out.join(ORDER_CSV);
    let mut writer = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["target".to_string(), "sampler".to_string(), "slope".to_string()];
    header.extend(order.steps.iter().map(|n| format!("rmse_N{n}")));
    writer.write_record(&header)?;
    for &t in &targets {
        let name = &exp.targets[t].0;
        for &sampler in &order.samplers {
            let cells: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| &c.target == name && c.sampler == sampler.as_str())
                .collect();
            let points: Vec<(usize, f64)> = cells
                .iter()
                .filter_map(|c| c.report.as_ref()?.oracle_rmse.map(|e| (c.steps, e)))
                .collect();
            let slope = match order_estimate(&points) {
                Ok(s) => Some(s),
                Err(e) => {
                    manifest.warnings.push(format!("{name}/{sampler}: no slope: {e}"));
                    None
                }
            };
            let mut row = vec![
                name.clone(),
                sampler.to_string(),
                slope.map(|s| s.to_string()).unwrap_or_default(),
            ];
            row.extend(order.steps.iter().map(|n| {
                points
                    .iter()
                    .find(|(m, _)| m == n)
                    .map(|(_, e)| e.to_string())
                    .unwrap_or_default()
            }));
            writer.write_record(&row)?;
            manifest.slopes.push(SlopeRecord {
                target: name.clone(),
                sampler: sampler.to_string(),
                slope,
                points,
            });
        }
    }
    writer.flush().map_err(|e| BenchError::io(&csv_path, e))?;
    manifest.cells = cells;
    manifest.save(&out.join(ORDER_MANIFEST))?;
    Ok(manifest)
}

fn order_cell(
    exp: &Experiment,
    t: usize,
    sampler: SamplerId,
    steps: usize,
    x0: &Array2<f64>,
    oracle: &Array2<f64>,
) -> CellRecord {
    let start = Instant::now();
    let (name, target) = &exp.targets[t];
    let mut record = CellRecord {
        target: name.clone(),
        sampler: sampler.to_string(),
        steps,
        seed: exp.config.order.seed,
        chains: x0.nrows(),
        nfe: sampler.nfe(steps, exp.config.oracle_fine_steps),
        counted_nfe: 0,
        x0_hash: hash_f64s(x0.iter()),
        wall_ms: 0.0,
        status: CellStatus::Ok,
        error: None,
        report: None,
        csv_row: None,
    };
    let outcome = (|| -> flowpath_core::Result<f64> {
        let field = Field::for_sampler(exp, target, sampler)?;
        let grid = TimeGrid::uniform(steps)?;
        let mut ends = Array2::zeros(x0.dim());
        let mut result = Ok(());
        for (i, row) in x0.rows().into_iter().enumerate() {
            match field.integrate(exp, sampler, &grid, row.as_slice().unwrap()) {
                Ok(e) => ends.row_mut(i).assign(&ArrayView1::from(&e)),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        record.counted_nfe = field.count();
        result?;
        endpoint_rmse(ends.view(), oracle.view())
    })();
    match outcome {
        Ok(rmse) => {
            record.report = Some(ReportRecord {
                oracle_rmse: Some(rmse),
                ..ReportRecord::default()
            })
        }
        Err(e) => {
            record.status = CellStatus::Failed;
            record.error = Some(e.to_string());
        }
    }
    record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    record
}
