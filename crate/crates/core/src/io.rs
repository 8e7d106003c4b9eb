//! Config parsing, results persistence and long-format plot data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentConfig, RoundMetrics, REQUIRED_KEYS};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Dataset keys holding file paths, resolved against the config's directory.
const PATH_KEYS: [&str; 6] = [
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_csv",
    "test_csv",
];

/// Read a TOML config, apply `key.path=value` overrides, fill defaults and validate.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path
        .parent()
        .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
        .unwrap_or(Path::new("."));
    let base = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    parse_config_str(&text, &base, overrides)
}

/// As [`parse_config`], with relative dataset paths resolved against `base`.
pub fn parse_config_str(text: &str, base: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<document>", e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|k| lookup(&table, k).is_none())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingConfig(missing));
    }
    resolve_paths(&mut table, base);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { "<root>".to_string() } else { key }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Re-apply overrides to an already resolved config, e.g. one read from a manifest.
pub fn override_config(config: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let text = toml::to_string(config).map_err(|e| Error::config("<document>", e.to_string()))?;
    parse_config_str(&text, Path::new("."), overrides)
}

/// Apply one `a.b.c=value` override. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty key segment in override"));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for (depth, part) in parts.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::config(parts[..=depth].join("."), "is not a table and cannot hold sub-keys")
        })?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut value = table.get(parts.next()?)?;
    for part in parts {
        value = value.as_table()?.get(part)?;
    }
    Some(value)
}

fn resolve_paths(table: &mut toml::Table, base: &Path) {
    let Some(dataset) = table.get_mut("dataset").and_then(toml::Value::as_table_mut) else {
        return;
    };
    for key in PATH_KEYS {
        if let Some(toml::Value::String(s)) = dataset.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

/// The sidecar written next to every metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, wall_time_secs: f64) -> Self {
        Self {
            seed: config.seed,
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Results(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text).map_err(|e| Error::Results(format!("manifest: {e}")))?;
        if m.seed != m.config.seed {
            return Err(Error::Results(format!(
                "manifest seed {} disagrees with config seed {}",
                m.seed, m.config.seed
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Paths of one run's output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsPaths {
    pub metrics: PathBuf,
    pub manifest: PathBuf,
}

/// Write `metrics.csv` and `manifest.json` into `out_dir`, creating it if needed.
pub fn write_results(
    metrics: &[RoundMetrics],
    config: &ExperimentConfig,
    wall_time_secs: f64,
    out_dir: &Path,
) -> Result<ResultsPaths> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = ResultsPaths {
        metrics: out_dir.join(METRICS_FILE),
        manifest: out_dir.join(MANIFEST_FILE),
    };
    let clusters = config.models.architectures.len();
    let file = fs::File::create(&paths.metrics).map_err(|e| Error::io(&paths.metrics, e))?;
    write_metrics(metrics, config.num_clients, clusters, file)?;
    RunManifest::new(config.clone(), wall_time_secs).write(&paths.manifest)?;
    Ok(paths)
}

fn header(clients: usize, clusters: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "round",
        "alpha",
        "aggregator",
        "participants",
        "comm_cost",
        "comm_total",
        "compute_cost",
        "distill_skipped",
        "regular_mean",
        "peak_mean",
        "local_mean",
        "meme_mean",
    ]
    .map(String::from)
    .to_vec();
    for k in 0..clusters {
        cols.push(format!("cluster{k}_regular"));
        cols.push(format!("cluster{k}_peak"));
    }
    for n in 0..clients {
        cols.push(format!("client{n}_regular"));
        cols.push(format!("client{n}_peak"));
    }
    cols
}

/// Write metrics as CSV. Floats use the shortest representation that parses back exactly.
pub fn write_metrics(metrics: &[RoundMetrics], clients: usize, clusters: usize, out: impl Write) -> Result<()> {
    let err = |e: csv::Error| Error::Results(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(clients, clusters)).map_err(err)?;
    for m in metrics {
        if m.regular_acc.len() != clients || m.peak_acc.len() != clients {
            return Err(Error::shape("per-client accuracies", clients, m.regular_acc.len()));
        }
        if m.cluster_regular.len() != clusters || m.cluster_peak.len() != clusters {
            return Err(Error::shape("per-cluster accuracies", clusters, m.cluster_regular.len()));
        }
        let mut row = vec![
            m.round.to_string(),
            m.alpha.to_string(),
            m.aggregator.map(|a| a.to_string()).unwrap_or_default(),
            m.participants.to_string(),
            m.comm_cost.to_string(),
            m.comm_total.to_string(),
            m.compute_cost.to_string(),
            m.distill_skipped.to_string(),
            m.regular_mean.to_string(),
            m.peak_mean.to_string(),
            m.local_mean.to_string(),
            m.meme_mean.map(|v| v.to_string()).unwrap_or_default(),
        ];
        for (r, p) in m.cluster_regular.iter().zip(&m.cluster_peak) {
            row.extend([r.to_string(), p.to_string()]);
        }
        for (r, p) in m.regular_acc.iter().zip(&m.peak_acc) {
            row.extend([r.to_string(), p.to_string()]);
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Results(e.to_string()))
}

/// Read a metrics CSV back. Accepts either the file or its run directory.
pub fn read_results(path: &Path) -> Result<Vec<RoundMetrics>> {
    let path = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_metrics(file)
}

pub fn read_metrics(input: impl std::io::Read) -> Result<Vec<RoundMetrics>> {
    let err = |e: csv::Error| Error::Results(e.to_string());
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(err)?.clone();
    let count = |prefix: &str| {
        headers
            .iter()
            .filter(|h| h.starts_with(prefix) && h.ends_with("_regular"))
            .count()
    };
    let (clients, clusters) = (count("client"), count("cluster"));
    let expected = header(clients, clusters);
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Results(format!("unexpected columns: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }

    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(err)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |i: usize| Error::Results(format!("row {}: bad value {:?} in {}", line + 1, field(i), expected[i]));
        let num = |i: usize| field(i).parse::<f64>().map_err(|_| bad(i));
        let int = |i: usize| field(i).parse::<u64>().map_err(|_| bad(i));
        let opt = |i: usize| -> Result<Option<f64>> { if field(i).is_empty() { Ok(None) } else { num(i).map(Some) } };
        let pairs = |start: usize, n: usize| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            for k in 0..n {
                a.push(num(start + 2 * k)?);
                b.push(num(start + 2 * k + 1)?);
            }
            Ok((a, b))
        };
        let (cluster_regular, cluster_peak) = pairs(12, clusters)?;
        let (regular_acc, peak_acc) = pairs(12 + 2 * clusters, clients)?;
        out.push(RoundMetrics {
            round: int(0)? as usize,
            alpha: num(1)?,
            aggregator: if field(2).is_empty() { None } else { Some(int(2)? as usize) },
            participants: int(3)? as usize,
            comm_cost: int(4)?,
            comm_total: int(5)?,
            compute_cost: int(6)?,
            distill_skipped: field(7).parse().map_err(|_| bad(7))?,
            regular_mean: num(8)?,
            peak_mean: num(9)?,
            local_mean: num(10)?,
            meme_mean: opt(11)?,
            cluster_regular,
            cluster_peak,
            regular_acc,
            peak_acc,
        });
    }
    Ok(out)
}

/// X axis of a plot series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Round,
    Compute,
    Comm,
}

/// Parsed `metric[,metric...][@round|compute|comm]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeriesSpec {
    pub metrics: Vec<String>,
    pub x: XAxis,
}

impl std::str::FromStr for SeriesSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (metrics, x) = match s.split_once('@') {
            Some((m, x)) => (m, x),
            None => (s, "round"),
        };
        let x = match x.trim() {
            "round" => XAxis::Round,
            "compute" => XAxis::Compute,
            "comm" => XAxis::Comm,
            other => return Err(Error::InvalidArgument(format!("unknown x axis {other:?}"))),
        };
        let metrics: Vec<String> = metrics.split(',').map(|m| m.trim().to_string()).collect();
        if metrics.iter().any(String::is_empty) {
            return Err(Error::InvalidArgument(format!("empty metric in series spec {s:?}")));
        }
        Ok(Self { metrics, x })
    }
}

/// One row of long-format plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub round: usize,
    pub x: f64,
    pub series: String,
    pub value: f64,
}

/// Values of `metric` for one round. `cluster` and `client` expand to every
/// index; `clusterK_peak` and the like select one.
fn metric_values(m: &RoundMetrics, metric: &str) -> Result<Vec<(String, f64)>> {
    let one = |v: f64| Ok(vec![(metric.to_string(), v)]);
    match metric {
        "regular" => return one(m.regular_mean),
        "peak" => return one(m.peak_mean),
        "local" => return one(m.local_mean),
        "meme" => return one(m.meme_mean.unwrap_or(f64::NAN)),
        "alpha" => return one(m.alpha),
        "comm_cost" => return one(m.comm_cost as f64),
        "comm_total" => return one(m.comm_total as f64),
        "compute_cost" => return one(m.compute_cost as f64),
        _ => {}
    }
    let unknown = || Error::InvalidArgument(format!("unknown metric {metric:?}"));
    let (stem, which) = metric.rsplit_once('_').ok_or_else(unknown)?;
    let (prefix, regular, peak) = if let Some(rest) = stem.strip_prefix("cluster") {
        (rest, &m.cluster_regular, &m.cluster_peak)
    } else if let Some(rest) = stem.strip_prefix("client") {
        (rest, &m.regular_acc, &m.peak_acc)
    } else {
        return Err(unknown());
    };
    let source = match which {
        "regular" => regular,
        "peak" => peak,
        _ => return Err(unknown()),
    };
    let name = &stem[..stem.len() - prefix.len()];
    if prefix.is_empty() {
        return Ok(source
            .iter()
            .enumerate()
            .map(|(k, &v)| (format!("{name}{k}_{which}"), v))
            .collect());
    }
    let k: usize = prefix.parse().map_err(|_| unknown())?;
    let v = *source
        .get(k)
        .ok_or(Error::IndexOutOfRange { context: "plot metric", index: k, bound: source.len() })?;
    Ok(vec![(metric.to_string(), v)])
}

/// Merge labelled results into long-format rows. Every input must share the
/// same evaluated rounds.
pub fn emit_plotdata(inputs: &[(String, Vec<RoundMetrics>)], spec: &SeriesSpec) -> Result<Vec<PlotRow>> {
    let Some((_, first)) = inputs.first() else {
        return Err(Error::Empty("results to plot"));
    };
    let grid: Vec<usize> = first.iter().map(|m| m.round).collect();
    for (label, ms) in inputs {
        if ms.iter().map(|m| m.round).ne(grid.iter().copied()) {
            return Err(Error::Results(format!("{label}: round grid differs from {}", inputs[0].0)));
        }
    }
    let mut rows = Vec::new();
    for (label, ms) in inputs {
        for metric in &spec.metrics {
            for m in ms {
                let x = match spec.x {
                    XAxis::Round => m.round as f64,
                    XAxis::Compute => m.compute_cost as f64,
                    XAxis::Comm => m.comm_total as f64,
                };
                for (name, value) in metric_values(m, metric)? {
                    rows.push(PlotRow {
                        round: m.round,
                        x,
                        series: format!("{label}:{name}"),
                        value,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.round.cmp(&b.round)));
    Ok(rows)
}

pub fn write_plotdata(rows: &[PlotRow], out: impl Write) -> Result<()> {
    let err = |e: csv::Error| Error::Results(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "x", "series", "value"]).map_err(err)?;
    for r in rows {
        w.write_record([r.round.to_string(), r.x.to_string(), r.series.clone(), r.value.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Results(e.to_string()))
}

/// Parse `key=v1,v2,...`. Commas inside brackets do not split, so array
/// values such as `models.architectures=[[8],[4]],[[16]]` work.
pub fn parse_grid_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("grid axis {spec:?} must look like key=v1,v2")))?;
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in values.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    if key.trim().is_empty() || out.iter().any(String::is_empty) {
        return Err(Error::InvalidArgument(format!("grid axis {spec:?} has an empty key or value")));
    }
    Ok((key.trim().to_string(), out))
}

/// Cartesian product of grid axes, each point as a list of `key=value` overrides.
pub fn expand_grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.iter()
            .flat_map(|point| {
                values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push(format!("{key}={v}"));
                    p
                })
            })
            .collect()
    })
}

/// Directory-safe name for a grid point, e.g. `mutual_epochs-10_scheduler.alpha_max-0.9`.
pub fn grid_point_name(point: &[String]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point
        .iter()
        .map(|kv| {
            kv.replacen('=', "-", 1)
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("_")
}
