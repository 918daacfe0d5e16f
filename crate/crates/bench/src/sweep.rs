use std::path::{Path, PathBuf};
use std::time::Instant;

use flowpath_core::metrics::{self, EnergyReference, SlicedW2Reference};
use flowpath_core::sampler::{initial_batch, TimeGrid};
use flowpath_core::{SamplerId, TargetDistribution};
use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::config::{Experiment, ExperimentConfig};
use crate::fields::Field;
use crate::manifest::{
    CellRecord, CellStatus, ReportRecord, RunKind, RunManifest, SampleFile, MANIFEST_FILE,
};
use crate::seeds::{hash_f64s, stream_seed};
use crate::{BenchError, Result};

pub const CSV_FILE: &str = "results.csv";
pub const CSV_HEADER: [&str; 11] = [
    "target",
    "sampler",
    "N",
    "nfe",
    "seed",
    "sliced_w2",
    "energy",
    "mean_err",
    "cov_err",
    "oracle_rmse",
    "wall_ms",
];

#[derive(Debug, Clone, Copy)]
struct Job {
    target: usize,
    sampler: SamplerId,
    steps: usize,
    seed_index: usize,
}

/// Data shared by every sampler for one (target, seed).
struct SeedData {
    x0: Array2<f64>,
    reference: Array2<f64>,
    sliced: Option<SlicedW2Reference>,
    energy: Option<EnergyReference>,
}

struct CellOutput {
    record: CellRecord,
    endpoints: Option<Array2<f64>>,
}

pub(crate) fn worker_count(config: &ExperimentConfig) -> usize {
    config
        .workers
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn pool(config: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(config))
        .build()
        .map_err(|e| BenchError::Config(format!("cannot start worker pool: {e}")))
}

pub(crate) fn prepare_output(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .and_then(|_| {
            let probe = dir.join(".write-probe");
            std::fs::write(&probe, b"")?;
            std::fs::remove_file(probe)
        })
        .map_err(|e| BenchError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Evaluate every (target, sampler, N, seed) cell and write `results.csv`,
/// `manifest.json` and the scatter samples into the output directory.
///
/// Cells that fail are recorded in the manifest and skipped in the CSV; the
/// sweep itself only errors on configuration or I/O problems.
pub fn run_sweep(config: &ExperimentConfig) -> Result<RunManifest> {
    let exp = Experiment::new(config.clone())?;
    let out = config.output_dir.clone();
    prepare_output(&out)?;
    let pool = pool(config)?;

    let mut jobs = Vec::new();
    for target in 0..exp.targets.len() {
        for &sampler in &config.samplers {
            for &steps in &config.steps {
                for seed_index in 0..config.seeds.len() {
                    jobs.push(Job {
                        target,
                        sampler,
                        steps,
                        seed_index,
                    });
                }
            }
        }
    }

    let plot_steps = *config.steps.iter().min().unwrap();
    let (seed_data, outputs) = pool.install(|| {
        let seed_data: Vec<Vec<SeedData>> = exp
            .targets
            .par_iter()
            .map(|(name, target)| {
                config
                    .seeds
                    .par_iter()
                    .map(|&seed| seed_data(&exp, name, target, seed))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<CellOutput> = jobs
            .par_iter()
            .map(|job| {
                let keep = job.steps == plot_steps && job.seed_index == 0;
                run_cell(&exp, job, &seed_data[job.target][job.seed_index], keep)
            })
            .collect();
        Ok::<_, BenchError>((seed_data, outputs))
    })?;

    let csv_path = out.join(CSV_FILE);
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(CSV_HEADER)?;
    let mut manifest = RunManifest::new(RunKind::Sweep, config, CSV_FILE);
    let mut row = 0;
    let mut kept = Vec::new();
    for (job, mut output) in jobs.iter().zip(outputs) {
        if let Some(report) = &output.record.report {
            let r = &output.record;
            writer.write_record([
                r.target.clone(),
                r.sampler.clone(),
                r.steps.to_string(),
                r.nfe.to_string(),
                r.seed.to_string(),
                fmt_opt(report.sliced_w2),
                fmt_opt(report.energy),
                fmt_opt(report.mean_err),
                fmt_opt(report.cov_err),
                fmt_opt(report.oracle_rmse),
                format!("{:.3}", r.wall_ms),
            ])?;
            output.record.csv_row = Some(row);
            row += 1;
        }
        if let Some(endpoints) = output.endpoints.take() {
            kept.push((*job, endpoints));
        }
        manifest.cells.push(output.record);
    }
    writer.flush().map_err(|e| BenchError::io(&csv_path, e))?;

    let sample_dir = out.join("samples");
    std::fs::create_dir_all(&sample_dir).map_err(|e| BenchError::io(&sample_dir, e))?;
    let limit = config.metrics.plot_points.max(1);
    for (t, (name, _)) in exp.targets.iter().enumerate() {
        let reference = &seed_data[t][0].reference;
        let rel = format!("samples/{name}__exact.csv");
        write_points(&out.join(&rel), reference.view(), limit)?;
        manifest.samples.push(SampleFile {
            target: name.clone(),
            source: "exact".into(),
            steps: None,
            path: rel,
        });
    }
    for (job, endpoints) in kept {
        let name = &exp.targets[job.target].0;
        let rel = format!("samples/{name}__{}__N{}.csv", job.sampler, job.steps);
        write_points(&out.join(&rel), endpoints.view(), limit)?;
        manifest.samples.push(SampleFile {
            target: name.clone(),
            source: job.sampler.to_string(),
            steps: Some(job.steps),
            path: rel,
        });
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn seed_data(exp: &Experiment, name: &str, target: &TargetDistribution<f64>, seed: u64) -> Result<SeedData> {
    let cfg = &exp.config;
    let x0 = initial_batch(cfg.chains, target.dim(), stream_seed(seed, name, "x0"));
    let reference = target.sample_exact(cfg.chains, stream_seed(seed, name, "reference"))?;
    let sliced = if cfg.metrics.sliced_w2 {
        Some(SlicedW2Reference::new(
            reference.view(),
            cfg.metrics.projections,
            stream_seed(seed, name, "projections"),
        )?)
    } else {
        None
    };
    let energy = if cfg.metrics.energy {
        Some(EnergyReference::new(reference.view())?)
    } else {
        None
    };
    Ok(SeedData {
        x0,
        reference,
        sliced,
        energy,
    })
}

fn run_cell(exp: &Experiment, job: &Job, data: &SeedData, keep_endpoints: bool) -> CellOutput {
    let start = Instant::now();
    let cfg = &exp.config;
    let (name, target) = &exp.targets[job.target];
    let mut record = CellRecord {
        target: name.clone(),
        sampler: job.sampler.to_string(),
        steps: job.steps,
        seed: cfg.seeds[job.seed_index],
        chains: cfg.chains,
        nfe: job.sampler.nfe(job.steps, cfg.oracle_fine_steps),
        counted_nfe: 0,
        x0_hash: hash_f64s(data.x0.iter()),
        wall_ms: 0.0,
        status: CellStatus::Ok,
        error: None,
        report: None,
        csv_row: None,
    };
    let mut counted = 0;
    let result = evaluate_cell(exp, job, target, data, &mut counted);
    record.counted_nfe = counted;
    let endpoints = match result {
        Ok((report, endpoints)) => {
            record.report = Some(report);
            keep_endpoints.then_some(endpoints)
        }
        Err(e) => {
            record.status = CellStatus::Failed;
            record.error = Some(e.to_string());
            None
        }
    };
    record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    CellOutput { record, endpoints }
}

fn evaluate_cell(
    exp: &Experiment,
    job: &Job,
    target: &TargetDistribution<f64>,
    data: &SeedData,
    counted: &mut u64,
) -> flowpath_core::Result<(ReportRecord, Array2<f64>)> {
    let cfg = &exp.config;
    let field = Field::for_sampler(exp, target, job.sampler)?;
    let grid = TimeGrid::uniform(job.steps)?;
    let mut endpoints = Array2::zeros(data.x0.dim());
    let run_all = |endpoints: &mut Array2<f64>| -> flowpath_core::Result<()> {
        for (i, x0) in data.x0.rows().into_iter().enumerate() {
            let end = field.integrate(exp, job.sampler, &grid, x0.as_slice().unwrap())?;
            endpoints.row_mut(i).assign(&ndarray::ArrayView1::from(&end));
        }
        Ok(())
    };
    let outcome = run_all(&mut endpoints);
    *counted = field.count();
    outcome?;

    let mut report = ReportRecord::default();
    if let Some(sliced) = &data.sliced {
        report.sliced_w2 = Some(sliced.distance(endpoints.view())?);
    }
    if let Some(energy) = &data.energy {
        report.energy = Some(energy.distance(endpoints.view())?);
    }
    if cfg.metrics.moments {
        let (mean_err, cov_err) = metrics::moment_errors(endpoints.view(), target)?;
        report.mean_err = Some(mean_err);
        report.cov_err = Some(cov_err);
    }
    let k = cfg.metrics.oracle_chains;
    if k > 0 {
        let mut oracle = Array2::zeros((k, target.dim()));
        let mut have = true;
        for (i, x0) in data.x0.rows().into_iter().take(k).enumerate() {
            match field.oracle(x0.as_slice().unwrap(), cfg.oracle_fine_steps) {
                Some(end) => oracle.row_mut(i).assign(&ndarray::ArrayView1::from(&end?)),
                None => {
                    have = false;
                    break;
                }
            }
        }
        if have {
            report.oracle_rmse = Some(metrics::endpoint_rmse(
                endpoints.slice(s![..k, ..]),
                oracle.view(),
            )?);
        }
    }
    Ok((report, endpoints))
}

fn write_points(path: &PathBuf, points: ArrayView2<'_, f64>, limit: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..points.ncols()).map(|i| format!("x{i}")).collect();
    writer.write_record(&header)?;
    for row in points.rows().into_iter().take(limit) {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(|e| BenchError::io(path, e))
}

/// Read a point file written by a sweep.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse).collect();
        points.push(row.map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?);
    }
    Ok(points)
}
