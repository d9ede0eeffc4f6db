use anyhow::Context;
use clap::{Parser, ValueEnum};
use octopus_core::controller::records_to_jsonl;
use octopus_core::sim::config::{ConfigError, Granularity, UseCaseConfig};
use octopus_core::sim::driver::{self, SimError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const PRESETS: [(&str, &str); 3] = [
    ("usecase1", include_str!("../../../configs/usecase1.toml")),
    ("usecase2", include_str!("../../../configs/usecase2.toml")),
    ("usecase3", include_str!("../../../configs/usecase3.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

/// Simulate an in-network DL accelerator on a traffic trace.
#[derive(Debug, Parser)]
#[command(name = "octopus", version)]
struct Args {
    /// Use-case config file, or one of the built-in presets usecase1..usecase3.
    config: String,
    #[arg(long, value_enum)]
    collab: Option<Switch>,
    /// Flows per engine batch.
    #[arg(long)]
    flows: Option<usize>,
    /// Seed for weights, calibration and synthetic traffic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    oracle: Option<Switch>,
    /// Directory for metrics, decisions, program images and the report.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Oracle(String),
    Other(anyhow::Error),
}

fn load_config(args: &Args) -> Result<UseCaseConfig, ConfigError> {
    let mut cfg = match PRESETS.iter().find(|(name, _)| *name == args.config) {
        Some((_, text)) if !Path::new(&args.config).exists() => UseCaseConfig::parse(text)?,
        _ => UseCaseConfig::load(Path::new(&args.config))?,
    };
    if let Some(c) = args.collab {
        cfg.collab = c.on();
    }
    if let Some(f) = args.flows {
        cfg.flows = f;
    }
    if let Some(o) = args.oracle {
        cfg.oracle = o.on();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        if let Some(spec) = cfg.traffic.synthetic.as_mut() {
            spec.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(args: &Args) -> Result<(), Failure> {
    let cfg = load_config(args).map_err(|e| Failure::Config(e.to_string()))?;
    let out = match driver::run(&cfg) {
        Ok(out) => out,
        Err(SimError::Config(e)) => return Err(Failure::Config(e.to_string())),
        Err(e) => return Err(Failure::Other(e.into())),
    };
    let io = |r: anyhow::Result<()>| r.map_err(Failure::Other);
    io(std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display())))?;
    let m = &out.metrics;
    let report = m.report(cfg.granularity == Granularity::Packet);
    let log: String = out.control_log.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect();
    let sched = &out.compiled.schedule;
    let vpe = match (&cfg.granularity, &out.compiled.kernel) {
        (Granularity::Packet, Some(k)) => k.program.listing(),
        _ => sched.vpe_image(),
    };
    for (name, text) in [
        ("metrics.jsonl", m.to_jsonl()),
        ("report.txt", report.clone()),
        ("decisions.jsonl", records_to_jsonl(&out.records)),
        ("control.jsonl", log),
        ("arype.s", sched.ary_image()),
        ("vpe.s", vpe),
        ("schedule.json", sched.to_json()),
        ("schedule.txt", sched.report()),
        ("config.toml", toml::to_string(&cfg).expect("config serializes")),
    ] {
        io(write(&args.out, name, &text))?;
    }
    print!("{report}");
    match &m.oracle.first_divergence {
        Some(d) => Err(Failure::Oracle(d.clone())),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Oracle(d)) => {
            eprintln!("ORACLE MISMATCH: {d}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
