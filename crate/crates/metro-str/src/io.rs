//! Scenario loading, trace/metrics serialization, and run configuration.
//!
//! Scenario files are TOML documents versioned by the mandatory
//! `version = "str_scenario_v1"` key; `SCHEMA.md` at the repository root
//! documents every key and unit. Demand rates accept either full
//! train-by-station matrices or compact base/band definitions expanded at
//! load time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventTrace, ModeComparison, RegulationMode, SolverOptions};
use crate::grid::Grid;
use crate::scenario::{
    validate_scenario, Disturbance, RevertPolicy, RunControlBounds, Scenario, ScenarioError,
    DEFAULT_KAPPA_B, DEFAULT_LAMBDA_MAX,
};

pub const SCENARIO_VERSION: &str = "str_scenario_v1";

/// Environment variable overriding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "STR_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("unsupported scenario version {found:?} (expected \"{SCENARIO_VERSION}\")")]
    UnsupportedVersion { found: Option<String> },
    #[error("{key}: expected {expected} entries, got {got}")]
    BadLength {
        key: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{key}: row {row} has {got} entries, expected {expected}")]
    RaggedMatrix {
        key: &'static str,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{key}: band {index} covers the terminal station; compact forms define stations 1..N-1 only")]
    BandOnTerminal { key: &'static str, index: usize },
    #[error("{key}: band {index} range {lo}..{hi} is empty or outside the line")]
    BadBand {
        key: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },
    #[error("{key}: give either the full matrix or base/per-station/band forms, not both")]
    ConflictingForms { key: &'static str },
    #[error("control: give exactly one of run_fraction or run_abs_s")]
    ConflictingRunBounds,
    #[error("unknown revert policy {0:?} (expected \"never\", \"immediate\", or {{ hysteresis = theta }})")]
    BadRevertPolicy(String),
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
}

#[derive(Debug, Error)]
pub enum WriteError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize {what}: {source}")]
    Serialize {
        what: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// Numeric leaf accepting both TOML integers and floats.
#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(untagged)]
enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    fn get(self) -> f64 {
        match self {
            Num::Int(v) => v as f64,
            Num::Float(v) => v,
        }
    }
}

impl From<f64> for Num {
    fn from(v: f64) -> Self {
        Num::Float(v)
    }
}

fn nums(values: &[f64]) -> Vec<Num> {
    values.iter().map(|&v| Num::Float(v)).collect()
}

#[derive(Debug, Deserialize, Serialize)]
struct ScenarioFile {
    version: Option<String>,
    name: Option<String>,
    line: LineSection,
    headway: HeadwaySection,
    capacity: CapacitySection,
    demand: DemandSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    delay_rate: Option<DelayRateSection>,
    weights: WeightsSection,
    control: ControlSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    regulation: Option<RegulationSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    disturbance: Vec<DisturbanceEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LineSection {
    stations: usize,
    trains: usize,
    nominal_run_s: Vec<Num>,
    min_dwell_s: Num,
}

#[derive(Debug, Deserialize, Serialize)]
struct HeadwaySection {
    scheduled_s: Num,
    min_s: Num,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_s: Option<Num>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CapacitySection {
    train: Num,
    platform: Num,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct DemandSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<Vec<Num>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_base: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_per_station: Option<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    alpha_band: Vec<RateBand>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<Vec<Num>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_base: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_per_station: Option<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    beta_band: Vec<RateBand>,
}

/// Piecewise-constant override over an inclusive train x station rectangle.
#[derive(Debug, Deserialize, Serialize)]
struct RateBand {
    trains: [usize; 2],
    stations: [usize; 2],
    value: Num,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct DelayRateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<Num>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_station: Option<Vec<Num>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa_b: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_max: Option<Num>,
}

#[derive(Debug, Deserialize, Serialize)]
struct WeightsSection {
    wait: Num,
    load: Num,
    punctuality: Num,
    regularity: Num,
    effort: Num,
}

#[derive(Debug, Deserialize, Serialize)]
struct ControlSection {
    /// `[down, up]` fractions of each section's nominal running time.
    #[serde(skip_serializing_if = "Option::is_none")]
    run_fraction: Option<[Num; 2]>,
    /// `[min, max]` seconds shared by all sections.
    #[serde(skip_serializing_if = "Option::is_none")]
    run_abs_s: Option<[Num; 2]>,
    dwell_abs_s: [Num; 2],
}

#[derive(Debug, Deserialize, Serialize)]
struct RegulationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    revert: Option<toml::Value>,
}

#[derive(Debug, Deserialize, Serialize)]
struct DisturbanceEntry {
    train: usize,
    station: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_s: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dwell_s: Option<Num>,
}

/// Expands one rate key from its full-matrix or compact form.
///
/// Compact semantics: `base`/`per_station` define stations `1..N-1`; the
/// terminal column is fixed by the model (`terminal` argument). Bands
/// override rectangles inside `1..N-1` and may not touch the terminal.
/// Full matrices are taken verbatim, terminal column included, and must
/// satisfy the terminal invariants on their own.
#[allow(clippy::too_many_arguments)]
fn expand_rate(
    key: &'static str,
    full: Option<&Vec<Vec<Num>>>,
    base: Option<f64>,
    per_station: Option<&Vec<Num>>,
    bands: &[RateBand],
    n_trains: usize,
    n_stations: usize,
    default_base: f64,
    station1_value: Option<f64>,
    terminal: f64,
) -> Result<Grid<f64>, LoadError> {
    if full.is_some() && (base.is_some() || per_station.is_some() || !bands.is_empty()) {
        return Err(LoadError::ConflictingForms { key });
    }
    if let Some(rows) = full {
        if rows.len() != n_trains {
            return Err(LoadError::BadLength {
                key,
                expected: n_trains,
                got: rows.len(),
            });
        }
        let mut grid = Grid::filled(n_trains, n_stations, 0.0);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_stations {
                return Err(LoadError::RaggedMatrix {
                    key,
                    row: r + 1,
                    expected: n_stations,
                    got: row.len(),
                });
            }
            for (c, v) in row.iter().enumerate() {
                grid.set(r + 1, c + 1, v.get());
            }
        }
        return Ok(grid);
    }

    let base = base.unwrap_or(default_base);
    let mut grid = Grid::filled(n_trains, n_stations, 0.0);
    for train in 1..=n_trains {
        for station in 1..n_stations {
            let v = if station == 1 {
                station1_value.unwrap_or(base)
            } else {
                base
            };
            grid.set(train, station, v);
        }
        grid.set(train, n_stations, terminal);
    }
    if let Some(per) = per_station {
        if per.len() != n_stations - 1 {
            return Err(LoadError::BadLength {
                key,
                expected: n_stations - 1,
                got: per.len(),
            });
        }
        for train in 1..=n_trains {
            for (idx, v) in per.iter().enumerate() {
                grid.set(train, idx + 1, v.get());
            }
        }
    }
    for (index, band) in bands.iter().enumerate() {
        let [t_lo, t_hi] = band.trains;
        let [s_lo, s_hi] = band.stations;
        if s_hi == n_stations {
            return Err(LoadError::BandOnTerminal {
                key,
                index: index + 1,
            });
        }
        if t_lo < 1 || t_hi > n_trains || t_lo > t_hi {
            return Err(LoadError::BadBand {
                key,
                index: index + 1,
                lo: t_lo,
                hi: t_hi,
            });
        }
        if s_lo < 1 || s_hi > n_stations - 1 || s_lo > s_hi {
            return Err(LoadError::BadBand {
                key,
                index: index + 1,
                lo: s_lo,
                hi: s_hi,
            });
        }
        for train in t_lo..=t_hi {
            for station in s_lo..=s_hi {
                grid.set(train, station, band.value.get());
            }
        }
    }
    Ok(grid)
}

fn parse_revert(value: &toml::Value) -> Result<RevertPolicy, LoadError> {
    match value {
        toml::Value::String(s) if s == "never" => Ok(RevertPolicy::Never),
        toml::Value::String(s) if s == "immediate" => Ok(RevertPolicy::Immediate),
        toml::Value::Table(t) => match t.get("hysteresis") {
            Some(toml::Value::Float(v)) => Ok(RevertPolicy::Hysteresis(*v)),
            Some(toml::Value::Integer(v)) => Ok(RevertPolicy::Hysteresis(*v as f64)),
            _ => Err(LoadError::BadRevertPolicy(value.to_string())),
        },
        other => Err(LoadError::BadRevertPolicy(other.to_string())),
    }
}

fn scenario_from_file(file: ScenarioFile, fallback_name: &str) -> Result<Scenario, LoadError> {
    if file.version.as_deref() != Some(SCENARIO_VERSION) {
        return Err(LoadError::UnsupportedVersion {
            found: file.version,
        });
    }
    let n_trains = file.line.trains;
    let n_stations = file.line.stations;

    let arrival_rate = expand_rate(
        "demand.alpha",
        file.demand.alpha.as_ref(),
        file.demand.alpha_base.map(Num::get),
        file.demand.alpha_per_station.as_ref(),
        &file.demand.alpha_band,
        n_trains,
        n_stations,
        0.0,
        None,
        0.0,
    )?;
    let alight_fraction = expand_rate(
        "demand.beta",
        file.demand.beta.as_ref(),
        file.demand.beta_base.map(Num::get),
        file.demand.beta_per_station.as_ref(),
        &file.demand.beta_band,
        n_trains,
        n_stations,
        0.0,
        Some(0.0), // nobody alights at the origin station
        1.0,
    )?;

    let delay = file.delay_rate.unwrap_or_default();
    let delay_rate =
        if delay.matrix.is_some() || delay.per_station.is_some() || delay.base.is_some() {
            expand_rate(
                "delay_rate",
                delay.matrix.as_ref(),
                delay.base.map(Num::get),
                delay.per_station.as_ref(),
                &[],
                n_trains,
                n_stations,
                0.0,
                None,
                // the terminal dwell still couples to the headway when declared
                // via base/per_station; keep it at the base value
                delay.base.map(Num::get).unwrap_or(0.0),
            )?
        } else {
            crate::scenario::derive_delay_rate(
                &arrival_rate,
                delay.kappa_b.map_or(DEFAULT_KAPPA_B, Num::get),
                delay.lambda_max.map_or(DEFAULT_LAMBDA_MAX, Num::get),
            )
        };

    let run_control = match (file.control.run_fraction, file.control.run_abs_s) {
        (Some([down, up]), None) => RunControlBounds::Fraction {
            down: down.get(),
            up: up.get(),
        },
        (None, Some([min, max])) => RunControlBounds::Absolute {
            min: min.get(),
            max: max.get(),
        },
        _ => return Err(LoadError::ConflictingRunBounds),
    };

    let revert_policy = match file.regulation.and_then(|r| r.revert) {
        Some(v) => parse_revert(&v)?,
        None => RevertPolicy::Never,
    };

    let mut disturbances = BTreeMap::new();
    for d in &file.disturbance {
        disturbances.insert(
            (d.train, d.station),
            Disturbance {
                run_s: d.run_s.map_or(0.0, Num::get),
                dwell_s: d.dwell_s.map_or(0.0, Num::get),
            },
        );
    }

    let scheduled = file.headway.scheduled_s.get();
    let scenario = Scenario {
        name: file.name.unwrap_or_else(|| fallback_name.to_string()),
        n_stations,
        n_trains,
        nominal_run: file.line.nominal_run_s.iter().map(|v| v.get()).collect(),
        min_dwell: file.line.min_dwell_s.get(),
        scheduled_headway: scheduled,
        min_headway: file.headway.min_s.get(),
        max_headway: file.headway.max_s.map_or(scheduled, Num::get),
        arrival_rate,
        alight_fraction,
        delay_rate,
        train_capacity: file.capacity.train.get(),
        platform_capacity: file.capacity.platform.get(),
        weight_wait: file.weights.wait.get(),
        weight_load: file.weights.load.get(),
        weight_punctuality: file.weights.punctuality.get(),
        weight_regularity: file.weights.regularity.get(),
        weight_effort: file.weights.effort.get(),
        run_control,
        dwell_control: (
            file.control.dwell_abs_s[0].get(),
            file.control.dwell_abs_s[1].get(),
        ),
        disturbances,
        revert_policy,
    };
    Ok(validate_scenario(scenario)?)
}

/// Loads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ScenarioFile = toml::from_str(&text).map_err(|source| LoadError::Parse {
        path: path.to_path_buf(),
        source: Box::new(source),
    })?;
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    scenario_from_file(file, &fallback)
}

/// Writes a scenario back out in canonical full-matrix form.
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), WriteError> {
    let path = path.as_ref();
    let to_rows = |g: &Grid<f64>| -> Vec<Vec<Num>> { g.rows().map(nums).collect() };
    let file = ScenarioFile {
        version: Some(SCENARIO_VERSION.to_string()),
        name: Some(scenario.name.clone()),
        line: LineSection {
            stations: scenario.n_stations,
            trains: scenario.n_trains,
            nominal_run_s: nums(&scenario.nominal_run),
            min_dwell_s: scenario.min_dwell.into(),
        },
        headway: HeadwaySection {
            scheduled_s: scenario.scheduled_headway.into(),
            min_s: scenario.min_headway.into(),
            max_s: Some(scenario.max_headway.into()),
        },
        capacity: CapacitySection {
            train: scenario.train_capacity.into(),
            platform: scenario.platform_capacity.into(),
        },
        demand: DemandSection {
            alpha: Some(to_rows(&scenario.arrival_rate)),
            beta: Some(to_rows(&scenario.alight_fraction)),
            ..DemandSection::default()
        },
        delay_rate: Some(DelayRateSection {
            matrix: Some(to_rows(&scenario.delay_rate)),
            ..DelayRateSection::default()
        }),
        weights: WeightsSection {
            wait: scenario.weight_wait.into(),
            load: scenario.weight_load.into(),
            punctuality: scenario.weight_punctuality.into(),
            regularity: scenario.weight_regularity.into(),
            effort: scenario.weight_effort.into(),
        },
        control: ControlSection {
            run_fraction: match scenario.run_control {
                RunControlBounds::Fraction { down, up } => Some([down.into(), up.into()]),
                RunControlBounds::Absolute { .. } => None,
            },
            run_abs_s: match scenario.run_control {
                RunControlBounds::Absolute { min, max } => Some([min.into(), max.into()]),
                RunControlBounds::Fraction { .. } => None,
            },
            dwell_abs_s: [
                scenario.dwell_control.0.into(),
                scenario.dwell_control.1.into(),
            ],
        },
        regulation: Some(RegulationSection {
            revert: Some(match scenario.revert_policy {
                RevertPolicy::Never => toml::Value::String("never".into()),
                RevertPolicy::Immediate => toml::Value::String("immediate".into()),
                RevertPolicy::Hysteresis(theta) => {
                    let mut t = toml::map::Map::new();
                    t.insert("hysteresis".into(), toml::Value::Float(theta));
                    toml::Value::Table(t)
                }
            }),
        }),
        disturbance: scenario
            .disturbances
            .iter()
            .map(|(&(train, station), d)| DisturbanceEntry {
                train,
                station,
                run_s: (d.run_s != 0.0).then_some(d.run_s.into()),
                dwell_s: (d.dwell_s != 0.0).then_some(d.dwell_s.into()),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| WriteError::Serialize {
        what: "scenario",
        source: Box::new(e),
    })?;
    fs::write(path, text).map_err(|source| WriteError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trace serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

/// Requested run: scenario, mode, output placement, solver overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub mode: RunMode,
    pub output_dir: PathBuf,
    pub t0: f64,
    pub trace_format: TraceFormat,
    pub solver: SolverOptions,
    /// Reserved; the model is deterministic and draws no random numbers.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Str,
    Fixed,
    Compare,
}

/// Default output directory: `STR_OUTPUT_DIR` if set, else `./out`.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_text(path: &Path, text: &str) -> Result<(), WriteError> {
    fs::write(path, text).map_err(|source| WriteError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn events_csv(trace: &EventTrace) -> Result<String, WriteError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "k", "i", "j", "t_d", "x_d", "h", "p_in", "p_str", "peak", "T_wait", "u1", "u2", "pfm_flag",
    ])
    .map_err(csv_err)?;
    for r in &trace.records {
        w.write_record(&[
            r.k.to_string(),
            r.train.to_string(),
            r.station.to_string(),
            r.departure_time.to_string(),
            r.deviation.to_string(),
            r.headway.to_string(),
            r.on_board.to_string(),
            r.stranded.to_string(),
            r.peak.to_string(),
            r.wait_time.to_string(),
            r.run_control.to_string(),
            r.dwell_control.to_string(),
            (r.pfm_episode as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

fn episodes_csv(trace: &EventTrace) -> Result<String, WriteError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "episode",
        "trigger_train",
        "trigger_station",
        "old_h",
        "new_h",
        "h",
        "F",
    ])
    .map_err(csv_err)?;
    for (idx, ep) in trace.episodes.iter().enumerate() {
        for &(h, f) in &ep.curve {
            w.write_record(&[
                (idx + 1).to_string(),
                ep.trigger_train.to_string(),
                ep.trigger_station.to_string(),
                ep.old_headway.to_string(),
                ep.new_headway.to_string(),
                h.to_string(),
                f.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

fn events_jsonl(trace: &EventTrace) -> Result<String, WriteError> {
    let mut out = String::new();
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

fn episodes_jsonl(trace: &EventTrace) -> Result<String, WriteError> {
    let mut out = String::new();
    for ep in &trace.episodes {
        out.push_str(&serde_json::to_string(ep).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

fn summary_json(trace: &EventTrace) -> Result<String, WriteError> {
    #[derive(Serialize)]
    struct SummaryDoc<'a> {
        mode: &'a str,
        #[serde(flatten)]
        summary: &'a crate::engine::TraceSummary,
    }
    let doc = SummaryDoc {
        mode: trace.mode.tag(),
        summary: &trace.summary,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(json_err)?;
    text.push('\n');
    Ok(text)
}

fn csv_err(e: csv::Error) -> WriteError {
    WriteError::Serialize {
        what: "trace csv",
        source: Box::new(e),
    }
}

fn json_err(e: serde_json::Error) -> WriteError {
    WriteError::Serialize {
        what: "trace json",
        source: Box::new(e),
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, WriteError> {
    let bytes = w.into_inner().map_err(|e| WriteError::Serialize {
        what: "trace csv",
        source: Box::new(e),
    })?;
    String::from_utf8(bytes).map_err(|e| WriteError::Serialize {
        what: "trace csv",
        source: Box::new(e),
    })
}

/// Writes one run's artifacts (`{prefix}events.*`, `{prefix}summary.json`,
/// `{prefix}pfm_episodes.*`) into the configured output directory and
/// returns the paths.
pub fn write_trace(
    trace: &EventTrace,
    config: &RunConfig,
    prefix: &str,
) -> Result<Vec<PathBuf>, WriteError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|source| WriteError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut written = Vec::new();
    let (events_name, episodes_name, events_text, episodes_text) = match config.trace_format {
        TraceFormat::Csv => (
            format!("{prefix}events.csv"),
            format!("{prefix}pfm_episodes.csv"),
            events_csv(trace)?,
            episodes_csv(trace)?,
        ),
        TraceFormat::Jsonl => (
            format!("{prefix}events.jsonl"),
            format!("{prefix}pfm_episodes.jsonl"),
            events_jsonl(trace)?,
            episodes_jsonl(trace)?,
        ),
    };
    for (name, text) in [
        (events_name, events_text),
        (episodes_name, episodes_text),
        (format!("{prefix}summary.json"), summary_json(trace)?),
    ] {
        let path = dir.join(name);
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes both traces of a comparison plus the paired series and the delta
/// summary.
pub fn write_comparison(
    cmp: &ModeComparison,
    config: &RunConfig,
) -> Result<Vec<PathBuf>, WriteError> {
    let mut written = write_trace(&cmp.str_trace, config, "str_")?;
    written.extend(write_trace(&cmp.fixed_trace, config, "fixed_")?);

    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "k",
        "peak_str",
        "peak_fixed",
        "wait_str",
        "wait_fixed",
        "stranded_str",
        "stranded_fixed",
    ])
    .map_err(csv_err)?;
    for p in &cmp.series {
        w.write_record(&[
            p.k.to_string(),
            p.peak_str.to_string(),
            p.peak_fixed.to_string(),
            p.wait_str.to_string(),
            p.wait_fixed.to_string(),
            p.stranded_str.to_string(),
            p.stranded_fixed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let series_path = config.output_dir.join("compare_series.csv");
    write_text(&series_path, &finish_csv(w)?)?;
    written.push(series_path);

    let mut delta = serde_json::to_string_pretty(&cmp.report).map_err(json_err)?;
    delta.push('\n');
    let delta_path = config.output_dir.join("delta.json");
    write_text(&delta_path, &delta)?;
    written.push(delta_path);
    Ok(written)
}

/// Runs the configured mode(s) end to end and writes all artifacts.
/// Returns the written paths and whether any regulation solve was flagged
/// infeasible.
pub fn execute_run(config: &RunConfig) -> Result<(Vec<PathBuf>, bool), RunError> {
    let scenario = load_scenario(&config.scenario_path)?;
    match config.mode {
        RunMode::Str | RunMode::Fixed => {
            let mode = if config.mode == RunMode::Str {
                RegulationMode::Str
            } else {
                RegulationMode::Fixed
            };
            let trace = crate::engine::run(&scenario, mode, config.t0, config.solver);
            let infeasible = trace.summary.infeasible_solves > 0;
            let paths = write_trace(&trace, config, "")?;
            Ok((paths, infeasible))
        }
        RunMode::Compare => {
            let cmp = crate::engine::compare_modes(&scenario, config.t0, config.solver);
            let infeasible = cmp.str_trace.summary.infeasible_solves > 0
                || cmp.fixed_trace.summary.infeasible_solves > 0;
            let paths = write_comparison(&cmp, config)?;
            Ok((paths, infeasible))
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Write(#[from] WriteError),
}
