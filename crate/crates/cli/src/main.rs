use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dfml::engine::{run, ExperimentConfig};
use dfml::io::{
    emit_plotdata, expand_grid, grid_point_name, override_config, parse_config, parse_grid_axis, read_results,
    write_plotdata, write_results, RunManifest, SeriesSpec, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(name = "dfml", version, about = "Serverless federated mutual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config or a previous run's manifest.json.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `key.path=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Merge result files into long-format `round,x,series,value` rows.
    Plotdata {
        /// Run directories or metrics.csv files.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// `metric[,metric...][@round|compute|comm]`, e.g. `peak,alpha@comm`.
        #[arg(long)]
        series: String,
        /// Series labels, one per result; defaults to each run's directory name.
        #[arg(long = "label")]
        labels: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cartesian product of one or more `key=v1,v2,...` axes.
    Sweep {
        config: PathBuf,
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            overrides,
        } => {
            let cfg = load(&config, seed, &overrides)?;
            execute(&cfg, &out)
        }
        Command::Plotdata {
            results,
            series,
            labels,
            out,
        } => plotdata(&results, &series, &labels, out.as_deref()),
        Command::Sweep {
            config,
            grid,
            out,
            seed,
            overrides,
        } => {
            let axes = grid
                .iter()
                .map(|g| parse_grid_axis(g))
                .collect::<dfml::Result<Vec<_>>>()?;
            for point in expand_grid(&axes) {
                let mut all = overrides.clone();
                all.extend(point.iter().cloned());
                let cfg = load(&config, seed, &all).with_context(|| format!("grid point {}", point.join(" ")))?;
                execute(&cfg, &out.join(grid_point_name(&point)))?;
            }
            Ok(())
        }
    }
}

/// Read a TOML config, or the resolved config inside a manifest.
fn load(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut overrides = overrides.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let is_manifest = path.extension().is_some_and(|e| e == "json") || path.is_dir();
    let cfg = if is_manifest {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest = RunManifest::read(&file)?;
        override_config(&manifest.config, &overrides)?
    } else {
        parse_config(path, &overrides)?
    };
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let metrics = run(cfg)?;
    let paths = write_results(&metrics, cfg, start.elapsed().as_secs_f64(), out)?;
    if let Some(last) = metrics.last() {
        eprintln!(
            "{} round {}: regular {:.4}, peak {:.4}, {} transfers -> {}",
            cfg.protocol.name.name(),
            last.round,
            last.regular_mean,
            last.peak_mean,
            last.comm_total,
            paths.metrics.display()
        );
    }
    Ok(())
}

fn plotdata(results: &[PathBuf], series: &str, labels: &[String], out: Option<&Path>) -> Result<()> {
    if !labels.is_empty() && labels.len() != results.len() {
        bail!("{} labels for {} results", labels.len(), results.len());
    }
    let spec: SeriesSpec = series.parse()?;
    let mut inputs = Vec::with_capacity(results.len());
    for (i, path) in results.iter().enumerate() {
        let label = match labels.get(i) {
            Some(l) => l.clone(),
            None => default_label(path),
        };
        let metrics = read_results(path).with_context(|| format!("reading {}", path.display()))?;
        inputs.push((label, metrics));
    }
    let rows = emit_plotdata(&inputs, &spec)?;
    match out {
        Some(p) => write_plotdata(&rows, fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => write_plotdata(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn default_label(path: &Path) -> String {
    let dir = if path.is_dir() { Some(path) } else { path.parent() };
    dir.and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
