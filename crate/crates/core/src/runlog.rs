//! Per-run CSV log.
//!
//! One row per PPO update and per ES generation, in execution order. The
//! first line is `# refine-es log schema <N>`; the header row after it is
//! fixed for a given schema version. Empty cells mean "not applicable to this
//! stage".

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::engine::GenerationRecord;
use crate::error::{io_err, Error, Result};
use crate::ppo::UpdateRecord;

pub const LOG_SCHEMA_VERSION: u32 = 1;

pub const LOG_HEADER: [&str; 11] = [
    "stage",
    "index",
    "steps",
    "mean_return",
    "best_return",
    "success_rate",
    "sigma_es",
    "alpha",
    "g_norm",
    "update_ratio",
    "center_return",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// `ppo` or `es`.
    pub stage: String,
    pub index: usize,
    /// Cumulative environment steps of the run, both stages included.
    pub steps: u64,
    pub mean_return: f64,
    pub best_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub sigma_es: Option<f64>,
    pub alpha: Option<f64>,
    pub g_norm: Option<f64>,
    pub update_ratio: Option<f64>,
    pub center_return: Option<f64>,
}

impl LogRow {
    pub fn from_ppo(r: &UpdateRecord) -> Self {
        Self {
            stage: "ppo".into(),
            index: r.update,
            steps: r.steps,
            mean_return: r.mean_return,
            best_return: None,
            success_rate: Some(r.success_rate),
            sigma_es: None,
            alpha: None,
            g_norm: None,
            update_ratio: None,
            center_return: None,
        }
    }

    /// `step_offset` is the Stage-1 consumption.
    pub fn from_es(r: &GenerationRecord, step_offset: u64) -> Self {
        Self {
            stage: "es".into(),
            index: r.generation,
            steps: step_offset + r.steps,
            mean_return: r.mean_return,
            best_return: Some(r.best_return),
            success_rate: None,
            sigma_es: Some(r.sigma_es),
            alpha: Some(r.alpha),
            g_norm: Some(r.g_norm),
            update_ratio: Some(r.update_ratio),
            center_return: r.center_return,
        }
    }
}

/// All rows of one run: Stage-1 updates then ES generations.
pub fn rows_for_run(ppo: &[UpdateRecord], es: &[GenerationRecord], ppo_steps: u64) -> Vec<LogRow> {
    ppo.iter()
        .map(LogRow::from_ppo)
        .chain(es.iter().map(|g| LogRow::from_es(g, ppo_steps)))
        .collect()
}

fn schema_line() -> String {
    format!("# refine-es log schema {LOG_SCHEMA_VERSION}\n")
}

pub fn to_csv(rows: &[LogRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(LOG_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    let body = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(schema_line() + &String::from_utf8(body).expect("csv output is UTF-8"))
}

/// Rewrites the whole log atomically.
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_atomic(path, to_csv(rows)?.as_bytes())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_csv(&text).map_err(|e| Error::Log(format!("{}: {e}", path.display())))
}

pub fn parse_csv(text: &str) -> Result<Vec<LogRow>> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if first.trim_end() != schema_line().trim_end() {
        return Err(Error::Log(format!("unsupported log schema line `{first}`")));
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != LOG_HEADER {
        return Err(Error::Log(format!("unexpected log header {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
