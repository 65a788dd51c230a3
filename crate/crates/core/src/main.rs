use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use temple_bp::harness::{self, ExperimentSpec, MeshKind, CATALOG};
use temple_bp::network::{run_network, NetworkConfig, BUILTIN};
use temple_bp::{ModelSpec, Result};

#[derive(Parser)]
#[command(name = "temple-bp", version, about = "Bound-preserving moving-mesh solver for ARZ traffic and sedimentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one catalog experiment and report its bound monitors.
    Run {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(CATALOG))]
        experiment: String,
        #[command(flatten)]
        common: Common,
    },
    /// Convergence study of k against a fine reference run.
    Converge {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(CATALOG), default_value = "smooth")]
        experiment: String,
        /// Resolutions of the study; the smallest also anchors the time refinement.
        #[arg(long = "N", value_delimiter = ',', default_values_t = [20usize, 40, 80, 160])]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 2560)]
        reference: usize,
        /// Keep the CFL number fixed instead of refining the time step faster than the grid.
        #[arg(long)]
        no_time_refinement: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Conservation error of a periodic experiment.
    Conserve {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(CATALOG), default_value = "pulse")]
        experiment: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a road network from a builtin name or a TOML file.
    Network {
        /// One of the builtin networks, or a path to a TOML config.
        config: String,
        #[command(flatten)]
        common: Common,
    },
    /// Fixed-mesh versus moving-mesh first-order schemes on equal-speed Riemann data.
    DemoImpossibility {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Arz,
    Sedimentation,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Local,
    Global,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeshArg {
    Moving,
    Fixed,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    vref: Option<f64>,
    /// Number of cells (single-valued for run, conserve and network).
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    cfl: Option<f64>,
    #[arg(long)]
    tfinal: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    limiter: Option<Switch>,
    #[arg(long, value_enum)]
    mesh: Option<MeshArg>,
    /// Directory for CSV snapshots and the JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn model(&self, current: ModelSpec) -> Result<ModelSpec> {
        let (gamma, v_ref) = match current {
            ModelSpec::ArzPower { gamma, v_ref } => (gamma, v_ref),
            ModelSpec::ArzLog { v_ref } => (0.0, v_ref),
            ModelSpec::Sedimentation => (2.0, 1.0),
        };
        let arz = || ModelSpec::arz(self.gamma.unwrap_or(gamma), self.vref.unwrap_or(v_ref));
        match (self.model, current) {
            (Some(ModelArg::Sedimentation), _) => Ok(ModelSpec::Sedimentation),
            (None, ModelSpec::Sedimentation) => Ok(current),
            _ => arz(),
        }
    }

    fn apply(&self, mut spec: ExperimentSpec) -> Result<ExperimentSpec> {
        spec.model = self.model(spec.model)?;
        if let Some(n) = self.n {
            spec.n = n;
        }
        if let Some(cfl) = self.cfl {
            spec.cfl = cfl;
        }
        if let Some(t) = self.tfinal {
            spec.t_final = t;
        }
        if let Some(mode) = self.mode {
            spec.global = mode == ModeArg::Global;
        }
        if let Some(l) = self.limiter {
            spec.limiter = l == Switch::On;
        }
        if let Some(mesh) = self.mesh {
            spec.mesh = match mesh {
                MeshArg::Moving => MeshKind::Moving,
                MeshArg::Fixed => MeshKind::Fixed,
            };
        }
        Ok(spec)
    }

    fn apply_network(&self, mut cfg: NetworkConfig) -> Result<NetworkConfig> {
        if self.model.is_some_and(|m| matches!(m, ModelArg::Sedimentation)) {
            return Err(temple_bp::Error::Config("networks are ARZ only".into()));
        }
        match self.model(cfg.model()?)? {
            ModelSpec::ArzPower { gamma, v_ref } => (cfg.gamma, cfg.v_ref) = (gamma, v_ref),
            ModelSpec::ArzLog { v_ref } => (cfg.gamma, cfg.v_ref) = (0.0, v_ref),
            ModelSpec::Sedimentation => unreachable!("rejected above"),
        }
        if let Some(n) = self.n {
            cfg = cfg.with_n(n);
        }
        if self.cfl.is_some() {
            cfg.cfl = self.cfl;
        }
        if let Some(t) = self.tfinal {
            cfg.t_final = t;
        }
        if let Some(mode) = self.mode {
            cfg.global = mode == ModeArg::Global;
        }
        if let Some(l) = self.limiter {
            cfg.limiter = l == Switch::On;
        }
        Ok(cfg)
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>, file: &str) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        harness::write_json(&dir.join(file), value)?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { experiment, common } => {
            let spec = common.apply(harness::catalog(&experiment)?)?;
            let result = harness::run_experiment(&spec)?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            if let Some(dir) = &common.out {
                harness::write_artifacts(dir, &spec.model, &result)?;
            }
            Ok(result.summary.bounds_ok)
        }
        Command::Converge { experiment, mut ns, reference, no_time_refinement, common } => {
            ns.sort_unstable();
            let base = (!no_time_refinement).then(|| ns[0]);
            let spec = common.apply(harness::catalog(&experiment)?)?.with_time_refinement(base);
            let report = harness::convergence_study(&spec, &ns, reference)?;
            #[derive(Serialize)]
            struct Orders<'a> {
                report: &'a harness::ErrorReport,
                weighted_l1_orders: Vec<f64>,
                unweighted_l1_orders: Vec<f64>,
            }
            let orders = Orders {
                weighted_l1_orders: report.orders(|r| r.weighted.l1),
                unweighted_l1_orders: report.orders(|r| r.unweighted.l1),
                report: &report,
            };
            emit(&orders, common.out.as_ref(), &format!("{experiment}_convergence.json"))?;
            Ok(true)
        }
        Command::Conserve { experiment, common } => {
            let spec = common.apply(harness::catalog(&experiment)?)?;
            let result = harness::run_experiment(&spec)?;
            #[derive(Serialize)]
            struct Conservation {
                name: String,
                n: usize,
                steps: usize,
                err_jphi: f64,
                err_jy: f64,
                failure: Option<String>,
            }
            let s = &result.summary;
            let report = Conservation { name: s.name.clone(), n: s.n, steps: s.steps, err_jphi: s.err_jphi, err_jy: s.err_jy, failure: s.failure.clone() };
            emit(&report, common.out.as_ref(), &format!("{}_n{}_conservation.json", s.name, s.n))?;
            Ok(s.bounds_ok)
        }
        Command::Network { config, common } => {
            let cfg = if BUILTIN.contains(&config.as_str()) { NetworkConfig::builtin(&config)? } else { NetworkConfig::load(config.as_ref())? };
            let cfg = common.apply_network(cfg)?;
            let (net, summary) = run_network(&cfg)?;
            if let Some(dir) = &common.out {
                net.write_snapshots(dir, "final")?;
            }
            emit(&summary, common.out.as_ref(), &format!("{}_summary.json", summary.name))?;
            Ok(summary.bounds_ok)
        }
        Command::DemoImpossibility { out } => {
            let cases = harness::impossibility_demo()?;
            emit(&cases, out.as_ref(), "impossibility.json")?;
            Ok(cases.iter().all(|c| c.moving_overshoot == 0.0))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
