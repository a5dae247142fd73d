mod config;
mod svg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use excitable::classify::{chart, region_at, signatures, ClassifyError, Region};
use excitable::continuation::{bifurcation_diagram, detect_snic, rest_fold, standard_launch};
use excitable::dynamics::{integrate, integrate_protocol, DynamicsError};
use excitable::equilibria::{find_equilibria, resting_state};
use excitable::gspt::{bistability_persistence, homoclinic_absence_check, ic_sweep, latency_scaling, GsptError};
use excitable::model::{ModelParams, I_STAR};
use serde::Serialize;
use serde_json::json;

use config::{
    load, BifdiagConfig, ChartConfig, ClassifyConfig, EquilibriaConfig, GsptConfig, SignaturesConfig, SimulateConfig,
};

#[derive(Parser)]
#[command(name = "excitable", version, about = "Equilibria, bifurcations and excitability classes of the mirrored FitzHugh-Nagumo model")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Also render an SVG where the command supports it
    #[arg(long, global = true)]
    svg: bool,

    /// Record that the run used no random seed (every algorithm is deterministic)
    #[arg(long, global = true)]
    seedless: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory, optionally under a current protocol
    Simulate,
    /// Equilibria with linear type and branch tag
    Equilibria,
    /// One-parameter bifurcation diagram in the applied current
    Bifdiag,
    /// Region chart over the (V0, n0) plane
    Chart,
    /// Region label of one (V0, n0) point
    Classify,
    /// Electrophysiological signature battery
    Signatures,
    /// Slow-fast scaling studies
    Gspt {
        #[arg(value_enum)]
        study: Study,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    IcSweep,
    Bistability,
    Absence,
    Latency,
}

impl Study {
    fn stem(self) -> &'static str {
        match self {
            Study::IcSweep => "ic_sweep",
            Study::Bistability => "bistability",
            Study::Absence => "absence",
            Study::Latency => "latency",
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Integrator(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Integrator(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Integrator(e) | Failure::Other(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

trait Classified<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn integrator_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classified<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn integrator_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Integrator(e.into()))
    }
}

struct Output {
    dir: PathBuf,
    seedless: bool,
}

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    version: &'a str,
    seedless: bool,
    config: &'a C,
    result: R,
}

impl Output {
    fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
            .with_context(|| format!("creating temporary file in {}", self.dir.display()))?;
        tmp.write_all(bytes)?;
        tmp.flush()?;
        let target = self.dir.join(name);
        tmp.persist(&target).with_context(|| format!("writing {}", target.display()))?;
        Ok(())
    }

    fn report<C: Serialize, R: Serialize>(&self, command: &str, config: &C, result: R) -> anyhow::Result<()> {
        let r = Report { command, version: env!("CARGO_PKG_VERSION"), seedless: self.seedless, config, result };
        let mut text = serde_json::to_string_pretty(&r)?;
        text.push('\n');
        self.write(&format!("{command}.json"), text.as_bytes())
    }
}

fn config_path(cli: &Cli) -> Result<&Path, Failure> {
    cli.config.as_deref().ok_or_else(|| Failure::Config(anyhow::anyhow!("--config is required")))
}

fn simulate(path: &Path, out: &Output) -> Result<(), Failure> {
    let mut cfg: SimulateConfig = load(path).config_err()?;
    let p = cfg.params;
    let s0 = cfg.initial.unwrap_or_else(|| resting_state(&p).map(|e| e.state).unwrap_or_else(|| standard_launch(&p)));
    cfg.initial = Some(s0);
    let tr = match &cfg.protocol {
        Some(proto) => integrate_protocol(&p, &s0, proto, &cfg.integrator),
        None => integrate(&p, &s0, &cfg.integrator),
    };
    let tr = match tr {
        Err(e @ (DynamicsError::InvalidOptions(_) | DynamicsError::InvalidProtocol(_))) => return Err(Failure::Config(e.into())),
        other => other.integrator_err()?,
    };
    out.write("trajectory.csv", tr.to_csv().as_bytes())?;
    out.report(
        "simulate",
        &cfg,
        json!({
            "termination": tr.termination,
            "t_final": tr.t_final(),
            "spikes": tr.spike_times(),
            "events": tr.events,
        }),
    )?;
    Ok(())
}

fn equilibria(path: &Path, out: &Output) -> Result<(), Failure> {
    let cfg: EquilibriaConfig = load(path).config_err()?;
    let eqs = find_equilibria(&cfg.params);
    out.report("equilibria", &cfg, json!({ "equilibria": eqs }))?;
    Ok(())
}

fn bifdiag(path: &Path, out: &Output) -> Result<(), Failure> {
    let cfg: BifdiagConfig = load(path).config_err()?;
    let d = bifurcation_diagram(&cfg.params, cfg.i_range, &cfg.options);
    for (stem, table) in d.csv_tables() {
        out.write(&format!("bifdiag_{stem}.csv"), table.as_bytes())?;
    }
    out.report(
        "bifdiag",
        &cfg,
        json!({
            "points": d.points,
            "cycles": d.cycles,
            "ambiguous_currents": d.ambiguous,
        }),
    )?;
    Ok(())
}

fn chart_cmd(path: Option<&Path>, out: &Output, with_svg: bool) -> Result<(), Failure> {
    // the chart has a complete default window, so the config is optional
    let cfg: ChartConfig = match path {
        Some(p) => load(p).config_err()?,
        None => ChartConfig { schema_version: config::SCHEMA_VERSION, options: Default::default() },
    };
    let c = chart(&cfg.options);
    out.write("chart.csv", c.to_csv().as_bytes())?;
    if with_svg {
        out.write("chart.svg", svg::chart_svg(&c).as_bytes())?;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for cell in &c.cells {
        *counts.entry(cell.region.map(Region::as_str).unwrap_or("unclassified")).or_default() += 1;
    }
    out.report(
        "chart",
        &cfg,
        json!({
            "counts": counts,
            "pitchfork": c.pitchfork,
            "tc_line": c.tc_line,
            "sn_curves": c.sn_curves,
        }),
    )?;
    Ok(())
}

fn classify(path: &Path, out: &Output) -> Result<(), Failure> {
    let cfg: ClassifyConfig = load(path).config_err()?;
    let result = match region_at(cfg.v0, cfg.n0, cfg.epsilon) {
        Ok(label) => {
            let p = ModelParams::new(cfg.epsilon, I_STAR, cfg.v0, cfg.n0).config_err()?;
            let snic = match label.region {
                Region::I => rest_fold(&p).map(|f| detect_snic(&p, &f)),
                _ => None,
            };
            json!({ "region": label.region.as_str(), "snic": snic, "evidence": label.evidence })
        }
        Err(ClassifyError::Dynamics(e)) => return Err(Failure::Integrator(e.into())),
        Err(e) => json!({ "region": null, "error": e.to_string() }),
    };
    out.report("classify", &cfg, result)?;
    Ok(())
}

fn signatures_cmd(path: &Path, out: &Output) -> Result<(), Failure> {
    let cfg: SignaturesConfig = load(path).config_err()?;
    let report = signatures(&cfg.params, &cfg.options);
    out.report("signatures", &cfg, report)?;
    Ok(())
}

fn gspt_failure(e: GsptError) -> Result<serde_json::Value, Failure> {
    match e {
        GsptError::Dynamics(d) => Err(Failure::Integrator(d.into())),
        GsptError::BadEpsilons => Err(Failure::Config(e.into())),
        // absence of a connection or a rest state is a finding, not a failure
        other => Ok(json!({ "error": other.to_string() })),
    }
}

fn gspt(path: &Path, out: &Output, study: Study) -> Result<(), Failure> {
    let cfg: GsptConfig = load(path).config_err()?;
    let stem = format!("gspt_{}", study.stem());
    let result = match study {
        Study::IcSweep => match ic_sweep(cfg.v0, cfg.n0, &cfg.epsilons) {
            Ok(st) => {
                out.write(&format!("{stem}.csv"), st.to_csv().as_bytes())?;
                serde_json::to_value(st).context("serializing study")?
            }
            Err(e) => gspt_failure(e)?,
        },
        Study::Bistability => {
            let grid = cfg.grid().unwrap_or_else(|| (0..=100).map(|k| I_STAR - 0.05 + 0.001 * k as f64).collect());
            match bistability_persistence(cfg.v0, cfg.n0, &cfg.epsilons, &grid) {
                Ok(st) => {
                    out.write(&format!("{stem}.csv"), st.to_csv().as_bytes())?;
                    serde_json::to_value(st).context("serializing study")?
                }
                Err(e) => gspt_failure(e)?,
            }
        }
        Study::Absence => match homoclinic_absence_check(cfg.v0, cfg.n0, &cfg.epsilons, cfg.samples) {
            Ok(r) => {
                let mut csv = String::from("epsilon,bracket_lo,bracket_hi,bracket_invalid,constant_sign\n");
                for row in &r.rows {
                    csv.push_str(&format!(
                        "{:.17e},{:.17e},{:.17e},{},{}\n",
                        row.epsilon, row.bracket.0, row.bracket.1, row.bracket_invalid, row.constant_sign
                    ));
                }
                out.write(&format!("{stem}.csv"), csv.as_bytes())?;
                json!({ "absent": r.absent(), "report": r })
            }
            Err(e) => gspt_failure(e)?,
        },
        Study::Latency => {
            let mut csv = String::from("epsilon,delta,value\n");
            let mut studies = vec![];
            for &eps in &cfg.epsilons {
                match latency_scaling(cfg.v0, cfg.n0, eps, &cfg.deltas) {
                    Ok((st, _)) => {
                        csv.push_str(st.to_csv().split_once('\n').map(|x| x.1).unwrap_or(""));
                        studies.push(serde_json::to_value(st).context("serializing study")?);
                    }
                    Err(e) => studies.push(gspt_failure(e)?),
                }
            }
            out.write(&format!("{stem}.csv"), csv.as_bytes())?;
            json!({ "studies": studies })
        }
    };
    out.report(&stem, &cfg, result)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = Output { dir: cli.out.clone(), seedless: cli.seedless };
    match &cli.command {
        Command::Chart => chart_cmd(cli.config.as_deref(), &out, cli.svg),
        Command::Simulate => simulate(config_path(cli)?, &out),
        Command::Equilibria => equilibria(config_path(cli)?, &out),
        Command::Bifdiag => bifdiag(config_path(cli)?, &out),
        Command::Classify => classify(config_path(cli)?, &out),
        Command::Signatures => signatures_cmd(config_path(cli)?, &out),
        Command::Gspt { study } => gspt(config_path(cli)?, &out, *study),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
