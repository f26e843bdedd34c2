//! The five subcommands. Each reads a validated [`RunConfig`] and writes into `io.output`.

use std::path::{Path, PathBuf};

use log::{info, warn};
use longdef::estimator::{initialize, Checkpoint, Estimator};
use longdef::model::{arm_problem, residuals, simulate as draw_cohort, PriorConfig, SyntheticProblem};
use longdef::shape::write_shape;
use longdef::transport::exp_parallel;
use longdef::{flow_shape, kernel::kernel_inner, shoot as shoot_geodesic, Points, Shape};
use longdef::{batch_personalize, EstimationOutput, LongitudinalDataset, ModelConfig, ModelParams};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::files::{write_json, DatasetManifest, GeodesicFile, GeodesicInput, ModelDir};
use crate::report::{estimation_errors, personalization_errors};
use crate::svg::{self, Frame, Row};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT: &str = "checkpoint.json";

fn prepare_output(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.io.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::data(out.display(), e))?;
    std::fs::write(out.join(RESOLVED_CONFIG), cfg.resolved().to_pretty_json() + "\n")?;
    Ok(out)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("io.{key} is required for this command")))
}

fn fixture(cfg: &RunConfig) -> CliResult<SyntheticProblem> {
    if cfg.model.dim != 2 {
        return Err(CliError::Config("the built-in arm fixture is planar; set model.dim=2 or supply io.geodesic".into()));
    }
    let mut p = arm_problem(cfg.model.n_sources, cfg.simulation.mixing_seed)?;
    let sim = &cfg.simulation;
    p.truth.reference_time = sim.reference_time;
    p.truth.var_time_shift = sim.var_time_shift;
    p.truth.var_log_accel = sim.var_log_accel;
    p.config = cfg.model.model_config();
    Ok(p)
}

/// Draws a cohort around the arm fixture. Writes the dataset and the `truth/` model directory.
pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_output(cfg)?;
    let SyntheticProblem { mut truth, config } = fixture(cfg)?;
    let sim = cfg.simulation.simulation_config(cfg.seed);
    let (dataset, state) = draw_cohort(&truth, &config, &sim)?;
    // The recorded noise variance is the one realized in the data.
    let r: f64 = residuals(&dataset, &state, &config)?.iter().flatten().sum();
    truth.var_noise = (r / dataset.total_residual_dimension()).max(1e-12);
    DatasetManifest::write_dataset(&out, &dataset)?;
    ModelDir::with_state(truth, &dataset, &state).write(&out.join("truth"))?;
    info!("simulated {} subjects, {} observations", dataset.len(), dataset.n_observations());
    Ok(())
}

fn write_trace(path: &Path, out: &EstimationOutput) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "iteration",
        "temperature",
        "step_size",
        "log_likelihood",
        "reference_time",
        "var_time_shift",
        "var_log_accel",
        "var_noise",
        "sweep_acceptance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(out.block_names().into_iter().map(|n| format!("acc_{n}")));
    w.write_record(&header)?;
    for row in &out.trace {
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(
            [
                row.temperature,
                row.step_size,
                row.log_likelihood,
                row.reference_time,
                row.var_time_shift,
                row.var_log_accel,
                row.var_noise,
                row.sweep_acceptance,
            ]
            .iter()
            .chain(&row.block_acceptance)
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_blocks(path: &Path, out: &EstimationOutput) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "proposal_std", "accepted", "proposed", "rate"])?;
    for b in &out.blocks {
        let rate = if b.proposed > 0 { b.accepted as f64 / b.proposed as f64 } else { 0.0 };
        w.write_record([b.kind.name(), b.proposal_std.to_string(), b.accepted.to_string(), b.proposed.to_string(), rate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Starting point of an estimation: geometry from `io.init`, mixing at zero, heuristics for the rest.
pub fn starting_point(
    cfg: &RunConfig,
    dataset: &LongitudinalDataset,
    model: &ModelConfig,
) -> CliResult<(ModelParams, longdef::model::LatentState, PriorConfig)> {
    let init = ModelDir::read(required(&cfg.io.init, "init")?)?.params;
    let rows = init.mean_control_points.as_slice().len();
    let mut pop = init.as_population();
    pop.mixing = nalgebra::DMatrix::zeros(rows, cfg.model.n_sources);
    let (theta0, z0) = initialize(dataset, pop, cfg.estimation.initial_var_log_accel, model)?;
    let priors = PriorConfig::centered_on(&theta0, &cfg.priors);
    Ok((theta0, z0, priors))
}

/// Runs MCMC-SAEM on `io.manifest`, resuming from the output checkpoint when `io.resume` is set.
pub fn estimate(cfg: &RunConfig) -> CliResult<EstimationOutput> {
    let out = prepare_output(cfg)?;
    let dataset = DatasetManifest::load_dataset(required(&cfg.io.manifest, "manifest")?)?;
    let model = cfg.model.model_config();
    let (theta0, z0, priors) = starting_point(cfg, &dataset, &model)?;
    let ck_path = out.join(CHECKPOINT);
    let est_cfg =
        cfg.estimation.estimator_config(cfg.seed, (cfg.estimation.checkpoint_every > 0).then(|| ck_path.clone()));
    let estimator = if cfg.io.resume && ck_path.exists() {
        let mut ck = Checkpoint::load(&ck_path)?;
        info!("resuming from iteration {}", ck.iteration);
        ck.config = est_cfg;
        Estimator::from_checkpoint(&dataset, ck, priors, model)?
    } else {
        if cfg.io.resume {
            warn!("no checkpoint at {}, starting afresh", ck_path.display());
        }
        Estimator::new(&dataset, theta0, z0, priors, model, est_cfg)?
    };
    let result = estimator.run()?;
    ModelDir::with_state(result.theta.clone(), &dataset, &result.state).write(&out.join("estimate"))?;
    write_trace(&out.join("trace.csv"), &result)?;
    write_blocks(&out.join("acceptance.csv"), &result)?;
    if !result.samples.is_empty() {
        write_json(&out.join("samples.json"), &result.samples)?;
    }
    if let Some(truth) = &cfg.io.truth {
        let est = ModelDir::with_state(result.theta.clone(), &dataset, &result.state);
        write_json(&out.join("errors.json"), &estimation_errors(&est, &ModelDir::read(truth)?, &model)?)?;
    }
    info!("estimation finished after {} iterations", result.iterations);
    Ok(result)
}

/// Fits individual latents of every subject of `io.manifest` against `io.params`.
pub fn personalize(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_output(cfg)?;
    let dataset = DatasetManifest::load_dataset(required(&cfg.io.manifest, "manifest")?)?;
    let theta = ModelDir::read(required(&cfg.io.params, "params")?)?.params;
    let model = cfg.model.model_config();
    let results = batch_personalize(&theta, &model, &dataset, &cfg.personalization)?;
    let ns = theta.n_sources();
    let mut w = csv::Writer::from_path(out.join("personalization.csv"))?;
    let mut header: Vec<String> = vec!["id".into(), "onset_age".into(), "log_acceleration".into()];
    header.extend((1..=ns).map(|j| format!("s_{j}")));
    header.extend(["objective", "residual", "iterations", "converged", "error"].map(String::from));
    w.write_record(&header)?;
    let mut ok = Vec::new();
    for (subject, r) in dataset.subjects.iter().zip(results) {
        let mut rec = vec![subject.id.clone()];
        match r {
            Ok(p) => {
                let z = &p.latents;
                rec.push(z.onset_age.to_string());
                rec.push(z.log_acceleration.to_string());
                rec.extend(z.sources.iter().map(|s| s.to_string()));
                rec.extend([p.objective.to_string(), p.residual.to_string(), p.iterations.to_string(), p.converged.to_string(), String::new()]);
                ok.push(p);
            }
            Err(e) => {
                warn!("subject {}: {e}", subject.id);
                rec.extend(std::iter::repeat_n(String::new(), ns + 6));
                rec.push(e.to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(truth) = &cfg.io.truth {
        if let Some(errs) = personalization_errors(&ok, &ModelDir::read(truth)?, &theta) {
            write_json(&out.join("personalization_errors.json"), &errs)?;
        }
    }
    Ok(())
}

fn geodesic_input(cfg: &RunConfig) -> CliResult<GeodesicInput> {
    if let Some(path) = &cfg.io.geodesic {
        let g = GeodesicFile::load(path)?;
        if g.template.dim() != cfg.model.dim {
            return Err(CliError::Config(format!("model.dim={} but the geodesic is {}-dimensional", cfg.model.dim, g.template.dim())));
        }
        return Ok(g);
    }
    let p = fixture(cfg)?;
    let k = &p.config.kernel;
    let t = p.truth;
    // First projected mixing column, rescaled to the kernel norm of the momenta.
    let pop = t.as_population();
    let mut e1 = vec![0.0; t.n_sources()];
    e1[0] = 1.0;
    let w = longdef::model::space_shift(&pop, &e1, k)?;
    let nw = kernel_inner(&t.mean_control_points, &w, &w, k).sqrt();
    let nm = kernel_inner(&t.mean_control_points, &t.mean_momenta, &t.mean_momenta, k).sqrt();
    let vector = (nw > 0.0).then(|| w.scaled(nm / nw));
    Ok(GeodesicInput { template: t.mean_template, control_points: t.mean_control_points, momenta: t.mean_momenta, vector })
}

fn sample_times(cfg: &RunConfig) -> Vec<f64> {
    let sh = &cfg.shoot;
    if sh.samples == 1 {
        return vec![sh.t0];
    }
    (0..sh.samples).map(|k| sh.t0 + (sh.t1 - sh.t0) * k as f64 / (sh.samples - 1) as f64).collect()
}

fn write_frames(dir: &Path, shapes: &[Shape], times: &[f64]) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("frames.csv"))?;
    w.write_record(["frame", "time", "mesh"])?;
    for (k, (s, t)) in shapes.iter().zip(times).enumerate() {
        let name = format!("frame_{k:03}.mesh");
        write_shape(s, dir.join(&name))?;
        w.write_record([k.to_string(), t.to_string(), name])?;
    }
    w.flush()?;
    Ok(())
}

/// Shoots the geodesic and writes sampled frames plus an SVG strip.
pub fn shoot(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_output(cfg)?;
    let g = geodesic_input(cfg)?;
    let k = cfg.model.model_config().kernel;
    let sh = &cfg.shoot;
    let times = sample_times(cfg);
    let segments = times.len().saturating_sub(1).max(1);
    let per_segment = ((sh.t1 - sh.t0).abs() / segments as f64 * sh.steps_per_unit as f64).ceil().max(1.0) as usize;
    let traj = shoot_geodesic(&g.control_points, &g.momenta, sh.t0, sh.t1, per_segment * segments, &k)?;
    let flowed = flow_shape(&traj, &g.template)?;
    let idx: Vec<usize> = (0..times.len()).map(|i| i * per_segment).collect();
    let shapes: Vec<Shape> = idx.iter().map(|&i| flowed.shape_at(i)).collect();
    write_frames(&out.join("frames"), &shapes, &times)?;
    if k.dim == 2 {
        let states = traj.states();
        let frames =
            idx.iter().zip(&shapes).map(|(&i, s)| Frame { shape: s, control_points: Some(&states[i].control_points), arrows: Some(&states[i].momenta) }).collect();
        let rows = [Row { label: "geodesic".into(), frames }];
        std::fs::write(out.join("shoot.svg"), svg::render(&rows, sh.arrow_scale))?;
    }
    Ok(())
}

/// Samples the exp-parallel curve of the geodesic in the direction of the space shift.
pub fn transport(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_output(cfg)?;
    let g = geodesic_input(cfg)?;
    let model = cfg.model.model_config();
    let w = g.vector.clone().unwrap_or_else(|| Points::zeros(g.momenta.dim(), g.momenta.len()));
    let times = sample_times(cfg);
    let curve = exp_parallel(&g.control_points, &g.momenta, cfg.shoot.t0, &w, &times, &g.template, &model.kernel, &model.steps)?;
    write_frames(&out.join("geodesic"), &curve.geodesic_shapes, &times)?;
    write_frames(&out.join("curve"), &curve.shapes, &times)?;
    if model.kernel.dim == 2 {
        fn row<'a>(label: &str, shapes: &'a [Shape], cps: &'a [Points], arrows: &'a [Points]) -> Row<'a> {
            let frames = shapes
                .iter()
                .zip(cps)
                .zip(arrows)
                .map(|((s, c), a)| Frame { shape: s, control_points: Some(c), arrows: Some(a) })
                .collect();
            Row { label: label.into(), frames }
        }
        let cps = &curve.control_points;
        let rows = [
            row("geodesic", &curve.geodesic_shapes, cps, &curve.geodesic_momenta),
            row("exp-parallel", &curve.shapes, cps, &curve.transported),
        ];
        std::fs::write(out.join("transport.svg"), svg::render(&rows, cfg.shoot.arrow_scale))?;
    }
    Ok(())
}
