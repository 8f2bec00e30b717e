use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use densitypath::io::{self, Checkpoint, RunWriter};
use densitypath::pdpo::{self, Context, EpochRecord};
use densitypath::problems::{self, ProblemConfig};
use densitypath::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "densitypath", version, about = "Action-minimizing density paths in neural-ODE parameter space")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List registered problems.
    List,
    /// Fit one boundary map by flow matching and write a checkpoint.
    Pretrain {
        #[arg(long, default_value_t = 1)]
        boundary: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full optimization and export the run directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sweep the number of time intervals instead of a single run.
        #[arg(long = "ablate-N", value_delimiter = ',')]
        ablate_n: Vec<usize>,
        /// Sweep the number of interior control points.
        #[arg(long = "ablate-K", value_delimiter = ',')]
        ablate_k: Vec<usize>,
    },
    /// Sweep N or K; one metrics row per value.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "N", value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long = "K", value_delimiter = ',')]
        k: Vec<usize>,
        /// Action evaluation grid for the N sweep.
        #[arg(long, default_value_t = 50)]
        eval_n: usize,
    },
    /// Run the oracle suite.
    Verify {
        /// Restrict to these checks.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Registered problem name or path to a TOML config.
    #[arg(default_value = "gauss-pair")]
    config: String,
    /// `key.path=value` overrides applied after loading.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Desk-scale quadrature and architecture.
    #[arg(long)]
    desk: bool,
    /// Output root (defaults to $DENSITYPATH_OUT, then ./runs).
    #[arg(long, env = "DENSITYPATH_OUT")]
    out_root: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ProblemConfig> {
        let p = Path::new(&self.config);
        let mut cfg = if p.exists() || self.config.ends_with(".toml") {
            ProblemConfig::load(p)?
        } else {
            problems::lookup(&self.config)?
        };
        if self.desk {
            cfg = cfg.desk();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let cfg = io::apply_overrides(&cfg, &self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn root(&self) -> PathBuf {
        self.out_root.clone().unwrap_or_else(io::out_root)
    }
}

fn pretrain(boundary: usize, out: Option<PathBuf>, common: &Common) -> Result<()> {
    if boundary > 1 {
        return Err(Error::Config(format!("boundary index must be 0 or 1, got {boundary}")));
    }
    let cfg = common.config()?;
    let fit = pdpo::pretrain_end(&cfg, boundary)?;
    let ctx = Context::new(&cfg)?;
    let w2 = ctx.fit_w2(&fit.theta, boundary)?;
    let out = out.unwrap_or_else(|| common.root().join(format!("{}-theta{boundary}-{}.json", cfg.name(), cfg.seed)));
    Checkpoint::from_params(cfg.architecture, format!("{}/rho{boundary}", cfg.name()), &fit.theta).write(&out)?;
    println!("final fm loss {:.6}", fit.final_loss);
    println!("boundary W2 {:.6}", w2);
    println!("checkpoint {}", out.display());
    Ok(())
}

/// One run into `dir`, with the trajectory export at the end.
fn run_into(cfg: &ProblemConfig, dir: PathBuf) -> Result<EpochRecord> {
    let mut writer = RunWriter::create(dir, cfg)?;
    let res = pdpo::run(cfg, &mut |rec, path| {
        println!(
            "epoch {:>3}  action {:.5}  kinetic {:.5}  obstacle {:.5}  W2 ({:.4}, {:.4})",
            rec.epoch, rec.action, rec.kinetic, rec.obstacle, rec.w2_rho0, rec.w2_rho1
        );
        writer.record(rec, path)
    })?;
    let ctx = Context::new(cfg)?;
    let times = io::export_times();
    let clouds = ctx.trajectory(&res.path, &times)?;
    io::write_atomic(&writer.dir.join("trajectory.csv"), &io::trajectory_csv(&times, &clouds)?)?;
    let knots: Vec<f64> = (0..res.path.len()).map(|i| res.path.knot(i)).collect();
    let ctl = ctx.trajectory(&res.path, &knots)?;
    io::write_atomic(&writer.dir.join("controls.csv"), &io::trajectory_csv(&knots, &ctl)?)?;
    Checkpoint::from_path(cfg.architecture, cfg.name(), &res.path).write(&writer.dir.join("path.json"))?;
    println!("run dir {}", writer.dir.display());
    Ok(*res.history.last().expect("history has the warmup row"))
}

fn cmd_run(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let dir = io::new_run_dir(&common.root(), &cfg)?;
    run_into(&cfg, dir)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRow {
    param: &'static str,
    value: usize,
    action_eval: f64,
    action: f64,
    kinetic: f64,
    obstacle: f64,
    w2_rho0: f64,
    w2_rho1: f64,
}

fn cmd_ablate(common: &Common, ns: &[usize], ks: &[usize], eval_n: usize) -> Result<()> {
    if ns.is_empty() == ks.is_empty() {
        return Err(Error::Config("give exactly one of the N or K sweeps".into()));
    }
    let base = common.config()?;
    let (param, values) = if ns.is_empty() { ("K", ks) } else { ("N", ns) };
    let dir = io::new_run_dir(&common.root(), &base)?;
    let dir = {
        let d = dir.with_file_name(format!("{}-ablate-{param}", dir.file_name().unwrap().to_string_lossy()));
        std::fs::rename(&dir, &d).map_err(|e| Error::io(&d, e))?;
        d
    };
    let mut rows = csv::Writer::from_writer(Vec::new());
    for &v in values {
        let mut cfg = base.clone();
        if param == "N" {
            cfg.quadrature.n = v;
        } else {
            cfg.quadrature.k = v;
        }
        cfg.validate()?;
        info!("ablation {param}={v}");
        let last = run_into(&cfg, dir.join(format!("{param}-{v}")))?;
        let path = Checkpoint::read(&dir.join(format!("{param}-{v}/path.json")))?.to_path()?;
        let action_eval = Context::new(&cfg)?.eval_action(&path, eval_n)?.total;
        println!("{param}={v}: action {:.5} (evaluated at N={eval_n}: {:.5})", last.action, action_eval);
        rows.serialize(AblationRow {
            param,
            value: v,
            action_eval,
            action: last.action,
            kinetic: last.kinetic,
            obstacle: last.obstacle,
            w2_rho0: last.w2_rho0,
            w2_rho1: last.w2_rho1,
        })
        .map_err(|e| Error::Parse(e.to_string()))?;
        rows.flush().map_err(|e| Error::io(&dir, e))?;
        io::write_atomic(&dir.join("ablation.csv"), rows.get_ref())?;
    }
    println!("ablation dir {}", dir.display());
    Ok(())
}

fn cmd_verify(only: &[String]) -> Result<bool> {
    for o in only {
        if !verify::SUITE.contains(&o.as_str()) {
            return Err(Error::Config(format!("unknown check `{o}`; known: {}", verify::SUITE.join(", "))));
        }
    }
    let checks = verify::run_suite(only, &mut |c| println!("{c}"))?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(failed == 0)
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::UnknownProblem(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = match &cli.cmd {
        Cmd::List => {
            for p in problems::registry() {
                println!("{:<22} d={} {}", p.name(), p.problem.d, p.architecture);
            }
            Ok(true)
        }
        Cmd::Pretrain { boundary, out, common } => pretrain(*boundary, out.clone(), common).map(|_| true),
        Cmd::Run { common, ablate_n, ablate_k } => {
            if ablate_n.is_empty() && ablate_k.is_empty() {
                cmd_run(common).map(|_| true)
            } else {
                cmd_ablate(common, ablate_n, ablate_k, 50).map(|_| true)
            }
        }
        Cmd::Ablate { common, n, k, eval_n } => cmd_ablate(common, n, k, *eval_n).map(|_| true),
        Cmd::Verify { only } => cmd_verify(only),
    };
    match out {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
