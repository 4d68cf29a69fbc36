//! Twin experiments, Lyapunov spectra, detectability reports, and
//! initial-state reconstruction from the command line. Every run writes a
//! `run_header.txt` with the fully resolved configuration and emits CSV
//! artifacts that are byte-reproducible from (config, seed).

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use config::{load_config, load_matrix, ExperimentConfig, Method, Model, Overrides};
use tsda_core::detect::{lti_detectable, ltv_detectability, min_gain, observability_matrix, DetectConfig, RANK_CUTOFF};
use tsda_core::filter::{run_exkf, run_filter, FilterConfig, RunResult};
use tsda_core::linalg::laplacian_observation;
use tsda_core::lyapunov::{compute_les, regularity_check, LeRunConfig};
use tsda_core::models::{burgers_initial, l96_initial, ModelSpec, ObservationProcess};
use tsda_core::ode::{rk4_step, TimeGrid};
use tsda_core::report::{
    detect_report_text, format_float, write_detect_csv, write_le_history_csv, write_run_csv,
    write_summary_csv, MemberSummary,
};
use tsda_core::seeds;
use tsda_core::{DenseMatrix, DenseVector};

/// Exit code signalling that at least one ensemble member diverged.
const EXIT_DIVERGENCE: i32 = 3;

/// Tolerance used when counting nonnegative exponents in reports.
const NONNEG_TOL: f64 = 0.02;

#[derive(Parser)]
#[command(
    name = "tsda",
    version,
    about = "Tangent-space data assimilation experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lyapunov spectrum of a model trajectory (writes lambda.csv)
    Les(RunArgs),
    /// Observer twin experiment (member CSVs plus summary.csv)
    Filter(RunArgs),
    /// Extended Kalman-Bucy twin experiment
    Exkf(RunArgs),
    /// Detectability report for the configured observation operator
    Detect(RunArgs),
    /// Least-squares initial-state reconstruction (linear models)
    Reconstruct(RunArgs),
    /// Observer twin experiment over an ensemble (default 20 members)
    Ensemble(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Model: l96, burgers, or linear-from-file
    #[arg(long)]
    model: Option<String>,
    /// State dimension
    #[arg(long)]
    d: Option<usize>,
    /// Tangent basis width
    #[arg(long)]
    k: Option<usize>,
    /// Gain scale
    #[arg(long)]
    p: Option<f64>,
    /// Integration step
    #[arg(long)]
    dt: Option<f64>,
    /// Experiment horizon (averaging horizon for les/detect)
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Observation operator rank (defaults to k)
    #[arg(long = "obs-rank")]
    obs_rank: Option<usize>,
    /// Observation noise level
    #[arg(long)]
    sigma: Option<f64>,
    /// Ensemble size
    #[arg(long = "ensemble")]
    ensemble: Option<usize>,
    /// Initial-condition perturbation scale
    #[arg(long = "perturb")]
    perturb: Option<f64>,
    /// Base seed; every random stream derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "tsda-out")]
    out: PathBuf,
    /// Configuration file (flat key = value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit successfully even when ensemble members diverge
    #[arg(long = "allow-divergence")]
    allow_divergence: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            d: self.d,
            k: self.k,
            p: self.p,
            dt: self.dt,
            t_end: self.t_end,
            obs_rank: self.obs_rank,
            sigma: self.sigma,
            ensemble: self.ensemble,
            perturb: self.perturb,
            seed: self.seed,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let (method, args) = match &cli.cmd {
        Cmd::Les(a) => (Method::Les, a),
        Cmd::Filter(a) => (Method::Filter, a),
        Cmd::Exkf(a) => (Method::Exkf, a),
        Cmd::Detect(a) => (Method::Detect, a),
        Cmd::Reconstruct(a) => (Method::Reconstruct, a),
        Cmd::Ensemble(a) => (Method::Ensemble, a),
    };
    match run(method, args) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

struct Experiment {
    cfg: ExperimentConfig,
    model: ModelSpec,
    truth_z0: DenseVector,
    h: DenseMatrix,
    /// System matrix of a linear model, when one was loaded from file.
    linear_a: Option<DenseMatrix>,
}

fn setup(method: Method, args: &RunArgs) -> Result<Experiment> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides(), method)?;

    let linear_a = match cfg.model {
        Model::LinearFromFile => {
            let path = cfg.model_file.clone().expect("validated by load_config");
            let a = load_matrix(&path)?;
            if let Some(d) = args.d {
                if d != a.nrows() {
                    bail!(
                        "--d {} conflicts with the {}x{} matrix in {}",
                        d,
                        a.nrows(),
                        a.ncols(),
                        path.display()
                    );
                }
            }
            cfg.d = a.nrows();
            if cfg.k > cfg.d || cfg.obs_rank > cfg.d {
                bail!(
                    "k = {} and obs_rank = {} must not exceed the matrix dimension {}",
                    cfg.k,
                    cfg.obs_rank,
                    cfg.d
                );
            }
            Some(a)
        }
        _ => None,
    };

    let model = match cfg.model {
        Model::L96 => ModelSpec::lorenz96(cfg.d, cfg.forcing)?,
        Model::Burgers => ModelSpec::burgers(cfg.d)?,
        Model::LinearFromFile => ModelSpec::linear(linear_a.clone().expect("loaded above"))?,
    };
    let truth_z0 = match cfg.model {
        Model::L96 => l96_initial(cfg.d),
        Model::Burgers => burgers_initial(cfg.d, seeds::derive_stream(cfg.seed, 0xB0)),
        Model::LinearFromFile => {
            let mut rng = seeds::stream_rng(cfg.seed, 0xB1);
            DenseVector::from_fn(cfg.d, |_, _| rng.sample(StandardNormal))
        }
    };
    let h = laplacian_observation(cfg.d, cfg.obs_rank)?;
    Ok(Experiment {
        cfg,
        model,
        truth_z0,
        h,
        linear_a,
    })
}

fn run(method: Method, args: &RunArgs) -> Result<i32> {
    let exp = setup(method, args)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    write_text(&args.out.join("run_header.txt"), &exp.cfg.header())?;

    match method {
        Method::Les => cmd_les(&exp, &args.out),
        Method::Filter | Method::Ensemble => cmd_twin(&exp, &args.out, args.allow_divergence),
        Method::Exkf => cmd_exkf(&exp, &args.out, args.allow_divergence),
        Method::Detect => cmd_detect(&exp, &args.out),
        Method::Reconstruct => cmd_reconstruct(&exp, &args.out),
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).with_context(|| format!("cannot write {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn cmd_les(exp: &Experiment, out: &Path) -> Result<i32> {
    let cfg = &exp.cfg;
    let mut le_cfg = LeRunConfig::new(cfg.k, cfg.t_end, cfg.dt);
    le_cfg.burn_in = cfg.burn_in;
    le_cfg.q0_seed = seeds::derive_stream(cfg.seed, 1);
    let est = compute_les(&exp.model, &exp.truth_z0, &le_cfg)?;

    let history = est.history.as_ref().expect("history always recorded");
    let mut w = create(&out.join("lambda.csv"))?;
    write_le_history_csv(&mut w, history)?;
    w.flush()?;

    println!("model {} with k = {}", exp.model.name, cfg.k);
    for (i, v) in est.values.iter().enumerate() {
        println!("lambda_{} = {}", i + 1, format_float(*v));
    }
    println!(
        "nonnegative exponents (tol {NONNEG_TOL}): {}",
        est.count_nonnegative(NONNEG_TOL)
    );
    match regularity_check(history) {
        Ok(diag) => println!("regularity gap = {}", format_float(diag.max_gap())),
        Err(e) => println!("regularity gap unavailable: {e}"),
    }
    println!("wrote {}", out.join("lambda.csv").display());
    Ok(0)
}

struct MemberOutcome {
    index: usize,
    run: std::result::Result<RunResult, tsda_core::Error>,
}

fn write_members(out: &Path, outcomes: &[MemberOutcome]) -> Result<(usize, Vec<MemberSummary>)> {
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut diverged = 0;
    for outcome in outcomes {
        let path = out.join(format!("member_{}.csv", outcome.index));
        let mut w = create(&path)?;
        match &outcome.run {
            Ok(run) => {
                write_run_csv(&mut w, run)?;
                rows.push(MemberSummary::from_run(outcome.index, run));
            }
            Err(e) => {
                writeln!(w, "t,err_norm")?;
                eprintln!("member {} diverged: {e}", outcome.index);
                diverged += 1;
                rows.push(MemberSummary {
                    member: outcome.index,
                    converged_at: None,
                    final_error: f64::NAN,
                });
            }
        }
        w.flush()?;
    }
    Ok((diverged, rows))
}

fn member_initial(exp: &Experiment, member_seed: u64) -> DenseVector {
    let mut rng = seeds::stream_rng(member_seed, 7);
    DenseVector::from_fn(exp.cfg.d, |i, _| {
        exp.truth_z0[i] + exp.cfg.perturbation_scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn cmd_twin(exp: &Experiment, out: &Path, allow_divergence: bool) -> Result<i32> {
    let cfg = &exp.cfg;
    let outcomes: Vec<MemberOutcome> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|index| {
            let member_seed = seeds::derive_stream(cfg.seed, index as u64);
            let x0 = member_initial(exp, member_seed);
            let run = ObservationProcess::new(exp.h.clone(), cfg.sigma, member_seed)
                .and_then(|obs| {
                    let mut fc = FilterConfig::new(cfg.p, cfg.k, cfg.dt, cfg.t_end);
                    fc.q0_seed = seeds::derive_stream(member_seed, 2);
                    run_filter(&exp.model, &obs, &exp.truth_z0, &x0, &fc)
                });
            MemberOutcome { index, run }
        })
        .collect();

    let (diverged, rows) = write_members(out, &outcomes)?;
    let mut w = create(&out.join("summary.csv"))?;
    write_summary_csv(&mut w, &rows)?;
    w.flush()?;

    let converged = rows.iter().filter(|r| r.converged_at.is_some()).count();
    println!(
        "{} members: {} converged below 1e-7, {} diverged",
        rows.len(),
        converged,
        diverged
    );
    println!("wrote {}", out.join("summary.csv").display());
    Ok(if diverged > 0 && !allow_divergence {
        EXIT_DIVERGENCE
    } else {
        0
    })
}

fn cmd_exkf(exp: &Experiment, out: &Path, allow_divergence: bool) -> Result<i32> {
    let cfg = &exp.cfg;
    // trust in the initial condition scales with the perturbation level
    let sigma0 = if cfg.perturbation_scale > 0.0 {
        cfg.perturbation_scale
    } else {
        0.01
    };
    let p0_scale = 1.0 / (4.0 * cfg.d as f64 * sigma0 * sigma0);
    let c = DenseMatrix::identity(cfg.obs_rank, cfg.obs_rank);

    let outcomes: Vec<MemberOutcome> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|index| {
            let member_seed = seeds::derive_stream(cfg.seed, index as u64);
            let x0 = member_initial(exp, member_seed);
            let run = ObservationProcess::new(exp.h.clone(), cfg.sigma, member_seed)
                .and_then(|obs| {
                    run_exkf(
                        &exp.model,
                        &obs,
                        &exp.truth_z0,
                        &x0,
                        p0_scale,
                        &c,
                        cfg.dt,
                        cfg.t_end,
                    )
                });
            MemberOutcome { index, run }
        })
        .collect();

    let (diverged, rows) = write_members(out, &outcomes)?;
    let mut w = create(&out.join("summary.csv"))?;
    write_summary_csv(&mut w, &rows)?;
    w.flush()?;

    println!(
        "ExKF with P(0) = {} I over {} members; {} diverged",
        format_float(p0_scale),
        rows.len(),
        diverged
    );
    println!("wrote {}", out.join("summary.csv").display());
    Ok(if diverged > 0 && !allow_divergence {
        EXIT_DIVERGENCE
    } else {
        0
    })
}

fn cmd_detect(exp: &Experiment, out: &Path) -> Result<i32> {
    let cfg = &exp.cfg;
    let mut dc = DetectConfig::new(cfg.k, cfg.t_end, cfg.dt);
    dc.burn_in = cfg.burn_in;
    dc.q0_seed = seeds::derive_stream(cfg.seed, 1);
    dc.le_tol = NONNEG_TOL;
    let h = exp.h.clone();
    let report = ltv_detectability(&exp.model, &exp.truth_z0, &mut move |_t| h.clone(), &dc)?;

    let mut text = detect_report_text(&report);
    if report.per_direction.iter().all(|&b| b) {
        if let Ok(p_min) = min_gain(&report.le_values, &report.direction_averages, 0.05) {
            text.push_str(&format!(
                "certified_min_gain_kappa_0.05 = {}\n",
                format_float(p_min)
            ));
        }
    }
    if let Some(a) = &exp.linear_a {
        let obs = observability_matrix(a, &exp.h, RANK_CUTOFF)?;
        let lti = lti_detectable(a, &exp.h, 1e-9)?;
        text.push_str(&format!("lti_observability_rank = {}\n", obs.rank));
        text.push_str(&format!("lti_kernel_dim = {}\n", obs.kernel_basis.ncols()));
        text.push_str(&format!("lti_detectable = {}\n", lti.detectable));
        if let Some(witness) = lti.witness {
            text.push_str(&format!(
                "lti_witness_eigenvalue = {} + {}i\n",
                format_float(witness.eigenvalue.re),
                format_float(witness.eigenvalue.im)
            ));
        }
    }
    write_text(&out.join("detect_report.txt"), &text)?;

    let mut w = create(&out.join("detect.csv"))?;
    write_detect_csv(&mut w, &report)?;
    w.flush()?;

    print!("{text}");
    println!("wrote {}", out.join("detect_report.txt").display());
    Ok(0)
}

fn cmd_reconstruct(exp: &Experiment, out: &Path) -> Result<i32> {
    let cfg = &exp.cfg;
    let Some(a) = &exp.linear_a else {
        bail!("reconstruct requires model = linear-from-file");
    };
    let obs = ObservationProcess::new(exp.h.clone(), cfg.sigma, cfg.seed)?;
    let grid = TimeGrid::new(0.0, cfg.t_end, cfg.dt)?;

    let mut z = exp.truth_z0.clone();
    let mut y = Vec::with_capacity(grid.n_steps() + 1);
    y.push(obs.observe(&z, 0));
    for i in 0..grid.n_steps() {
        let mut rhs = |_t: f64, s: &DenseVector| Ok(a * s);
        z = rk4_step(&mut rhs, grid.time(i), &z, grid.step_size(i))?;
        y.push(obs.observe(&z, (i + 1) as u64));
    }

    let (v_dagger, residual) =
        tsda_core::detect::least_squares_initial_state(a, &exp.h, &y, cfg.dt)?;
    let recon_error = (&v_dagger - &exp.truth_z0).norm();

    let mut w = create(&out.join("reconstruct.csv"))?;
    writeln!(w, "index,z0,v_dagger")?;
    for i in 0..cfg.d {
        writeln!(
            w,
            "{},{},{}",
            i,
            format_float(exp.truth_z0[i]),
            format_float(v_dagger[i])
        )?;
    }
    w.flush()?;

    let summary = format!(
        "residual = {}\nreconstruction_error = {}\n",
        format_float(residual),
        format_float(recon_error)
    );
    write_text(&out.join("reconstruct_summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {}", out.join("reconstruct.csv").display());
    Ok(0)
}
