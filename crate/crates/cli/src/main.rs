use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fvinv::critical::{rho_scan, RhoScan};
use fvinv::experiment::{run_experiment, CriticalSpaceReport, ExperimentConfig, Manifest, RealizationFile, MAX_FAILURE_FRACTION};
use fvinv::fv::run_fv;
use fvinv::metrics::angular_distance;
use fvinv::solver::predict_objective;
use fvinv::{Error, FeatureObjective, SubspaceBasis};

#[derive(Parser)]
#[command(name = "fvinv", version, about = "Feature visualization and its inversion")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "IFV_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Visualize one objective and save the realization with its Jacobian.
    Fv {
        config: PathBuf,
        /// Comma-separated vector, or `canonical:i`.
        #[arg(long)]
        objective: String,
        #[arg(long, default_value = "realization.json")]
        output: PathBuf,
        /// Overrides the FV seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recover the objective of a saved realization.
    Invert {
        realization: PathBuf,
        /// Significance exponent; defaults to the one stored in the file.
        #[arg(long)]
        k: Option<u32>,
        /// A subspace basis or a `critical_space.json` from a run.
        #[arg(long)]
        critical_space: Option<PathBuf>,
    },
    /// Enumerate the critical spaces of a directory of realizations.
    RhoScan {
        dir: PathBuf,
        /// Uses only the first N files in name order.
        #[arg(long)]
        sample_count: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize the outputs of a finished run.
    Report { dir: PathBuf },
}

/// Exit codes: 1 for bad input or a failed run, 2 for too many failed samples.
enum Failure {
    Input(String),
    Samples(f64),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Run { config, output } => run(&config, output),
        Command::Fv {
            config,
            objective,
            output,
            seed,
        } => fv(&config, &objective, &output, seed),
        Command::Invert {
            realization,
            k,
            critical_space,
        } => invert(&realization, k, critical_space.as_deref()),
        Command::RhoScan { dir, sample_count, output } => scan(&dir, sample_count, output.as_deref()),
        Command::Report { dir } => report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Samples(frac)) => {
            eprintln!("error: {:.1}% of samples failed", 100.0 * frac);
            ExitCode::from(2)
        }
    }
}

fn run(config: &Path, output: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(dir) = output {
        cfg.output_dir = dir;
    }
    let rep = run_experiment(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&rep.summary).map_err(Error::from)?);
    println!("outputs in {} ({:.1} s)", rep.output_dir.display(), rep.timings.total_s);
    let frac = rep.summary.failure_fraction();
    if frac > MAX_FAILURE_FRACTION {
        return Err(Failure::Samples(frac));
    }
    Ok(())
}

fn parse_objective(spec: &str, n_f: usize) -> Result<FeatureObjective, Failure> {
    if let Some(i) = spec.strip_prefix("canonical:") {
        let i: usize = i.trim().parse().map_err(|_| Failure::Input(format!("bad feature index in {spec:?}")))?;
        if i >= n_f {
            return Err(Failure::Input(format!("feature {i} out of range for {n_f} features")));
        }
        return Ok(FeatureObjective::canonical(n_f, i));
    }
    let v: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Input(format!("bad objective {spec:?}: {e}")))?;
    if v.len() != n_f {
        return Err(Failure::Input(format!("objective has {} entries, the network has {n_f} features", v.len())));
    }
    Ok(FeatureObjective::normalized(v)?)
}

fn fv(config: &Path, objective: &str, output: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let pipe = cfg.build_pipeline()?;
    let x = parse_objective(objective, pipe.n_features())?;
    let mut fv = cfg.fv.clone();
    if let Some(s) = seed {
        fv.seed = s;
    }
    let r = run_fv(&pipe, &x, cfg.k, &fv)?;
    let jacobian = pipe.jacobian(&r.v_star)?;
    let pred = predict_objective(&r.y, &jacobian, cfg.k, &SubspaceBasis::full(pipe.n_features()))?;
    println!("significance {:.6e}, gradient norm {:.3e}", r.final_value, r.grad_norm_at_opt);
    println!("y     = {:?}", r.y.values());
    println!("x_hat = {:?} ({:.3} deg from the objective)", pred.x_hat.as_slice(), angular_distance(&pred.x_hat, &x));
    RealizationFile {
        k: cfg.k,
        objective: Some(x),
        y: r.y,
        jacobian,
        v_star: r.v_star,
        image: r.image,
    }
    .save(output)?;
    println!("realization written to {}", output.display());
    Ok(())
}

fn load_critical_space(path: &Path) -> Result<SubspaceBasis, Failure> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    if let Ok(b) = serde_json::from_str::<SubspaceBasis>(&text) {
        return Ok(b);
    }
    let rep: CriticalSpaceReport =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: neither a basis nor a critical space report: {e}", path.display())))?;
    Ok(rep.candidates[rep.selected].critical_space.clone())
}

fn invert(path: &Path, k: Option<u32>, critical_space: Option<&Path>) -> Result<(), Failure> {
    let r = RealizationFile::load(path)?;
    let c = match critical_space {
        Some(p) => load_critical_space(p)?,
        None => SubspaceBasis::full(r.y.len()),
    };
    let pred = predict_objective(&r.y, &r.jacobian, k.unwrap_or(r.k), &c)?;
    println!("{}", serde_json::to_string_pretty(&pred).map_err(Error::from)?);
    if let Some(x) = &r.objective {
        println!("angular distance to the stored objective: {:.4} deg", angular_distance(&pred.x_hat, x));
    }
    Ok(())
}

fn scan(dir: &Path, sample_count: Option<usize>, output: Option<&Path>) -> Result<(), Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.truncate(sample_count.unwrap_or(usize::MAX));
    if files.is_empty() {
        return Err(Failure::Input(format!("no realization files in {}", dir.display())));
    }
    let jacs = files
        .iter()
        .map(|p| RealizationFile::load(p).map(|r| r.jacobian))
        .collect::<Result<Vec<_>, _>>()?;
    let s: RhoScan = rho_scan(&jacs)?;
    println!("{} Jacobians, {} features", s.sample_count, s.ambient_dim);
    for p in &s.plateaus {
        println!("rho in ({:.3e}, {:.3e}]  dim {}", p.rho_lo, p.rho_hi, p.dim);
    }
    if let Some(out) = output {
        fs::write(out, serde_json::to_string_pretty(&s).map_err(Error::from)?).map_err(Error::from)?;
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn report(dir: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(Error::from)?;
    let s = &m.summary;
    println!("version {}  seed {}  features {}  params {}", m.version, m.master_seed, m.n_features, m.n_params);
    println!("samples {} (failed {}), validation {} (failed {})", s.samples, s.failed, s.validation_samples, s.validation_failed);
    println!("critical space dim {}", s.critical_space_dim);
    println!("median angle x_hat   {} deg", fmt(s.median_angular_distance_deg));
    println!("  random targets     {} deg", fmt(s.median_angular_distance_random_deg));
    println!("  canonical targets  {} deg", fmt(s.median_angular_distance_canonical_deg));
    println!("median angle proj.   {} deg", fmt(s.median_projected_distance_deg));
    println!("median angle full    {} deg", fmt(s.median_full_space_distance_deg));
    println!("median angle ybar    {} deg", fmt(s.median_ybar_distance_deg));
    println!(
        "median ssim true {}  x_hat {}  ybar {}  random {}",
        fmt(s.median_ssim_reopt_true),
        fmt(s.median_ssim_reopt_hat),
        fmt(s.median_ssim_reopt_ybar),
        fmt(s.median_ssim_reopt_random)
    );
    println!("stable fraction {}", fmt(s.stable_fraction));
    if !s.alpha.is_empty() {
        let a: Vec<String> = s.alpha.iter().map(|a| format!("{a:.3}")).collect();
        println!("alpha [{}]", a.join(", "));
    }
    let cs = dir.join("critical_space.json");
    if cs.is_file() {
        let rep: CriticalSpaceReport = serde_json::from_str(&fs::read_to_string(cs).map_err(Error::from)?).map_err(Error::from)?;
        for (i, c) in rep.candidates.iter().enumerate() {
            let mark = if i == rep.selected { "*" } else { " " };
            println!("{mark} dim {:2}  validation {} deg  {}", c.critical_space.dim(), fmt(c.validation_median_deg), c.label);
        }
    }
    Ok(())
}
