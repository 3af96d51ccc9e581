//! Evaluation artifact writers. Every file carries a metadata block (config
//! hash, lexicon version, tool version) and is written deterministically:
//! identical inputs produce byte-identical outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::TaskAgreement;
use crate::alignment::{Dimension, LabelProgressionSeries, Ranking};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialising {what}: {source}")]
    Serialise {
        what: &'static str,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub lexicon_version: String,
    pub tool_version: String,
}

/// One conversation's diversity reading; `included` marks conversations long
/// enough to count toward the distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtldDistributionRow {
    pub setting_id: String,
    pub conversation_id: String,
    pub score: f64,
    pub token_count: usize,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub meta: ReportMeta,
    pub ranking: Ranking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub meta: ReportMeta,
    pub tasks: Vec<TaskAgreement>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(
    path: &Path,
    what: &'static str,
    value: &T,
) -> Result<(), ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| ReportError::Serialise { what, source })?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn csv_meta_header(meta: &ReportMeta) -> String {
    format!(
        "# config_hash: {}\n# lexicon_version: {}\n# tool_version: {}\n",
        meta.config_hash, meta.lexicon_version, meta.tool_version
    )
}

/// Shortest decimal that round-trips to the same f64, so full precision
/// survives the CSV without locale or padding noise.
fn full(v: f64) -> String {
    format!("{v}")
}

pub fn write_benchmark_json(
    dir: &Path,
    meta: &ReportMeta,
    ranking: &Ranking,
) -> Result<PathBuf, ReportError> {
    let path = dir.join("benchmark.json");
    let report = BenchmarkReport {
        meta: meta.clone(),
        ranking: ranking.clone(),
    };
    write_json(&path, "benchmark report", &report)?;
    Ok(path)
}

pub fn read_benchmark_json(path: &Path) -> Result<BenchmarkReport, ReportError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&raw).map_err(|source| ReportError::Serialise {
        what: "benchmark report",
        source,
    })
}

pub fn render_benchmark_markdown(meta: &ReportMeta, ranking: &Ranking) -> String {
    let mut out = String::new();
    out.push_str("# Patient-simulator fidelity benchmark\n\n");
    out.push_str(&format!("- config hash: `{}`\n", meta.config_hash));
    out.push_str(&format!("- lexicon version: `{}`\n", meta.lexicon_version));
    out.push_str(&format!("- tool version: `{}`\n\n", meta.tool_version));
    out.push_str("| Setting | NEP | Emotion | Diversity | Length | Markers | Overall |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for row in &ranking.rows {
        out.push_str(&format!("| {} ", row.setting_id));
        for dim in Dimension::ALL {
            let score = row
                .scores
                .get(&dim)
                .map(|s| s.similarity)
                .unwrap_or(f64::NAN);
            out.push_str(&format!("| {score:.2} "));
        }
        out.push_str(&format!("| {:.2} |\n", row.overall));
    }
    out
}

pub fn write_benchmark_markdown(
    dir: &Path,
    meta: &ReportMeta,
    ranking: &Ranking,
) -> Result<PathBuf, ReportError> {
    let path = dir.join("benchmark.md");
    write_file(&path, render_benchmark_markdown(meta, ranking).as_bytes())?;
    Ok(path)
}

pub fn write_benchmark_csv(
    dir: &Path,
    meta: &ReportMeta,
    ranking: &Ranking,
) -> Result<PathBuf, ReportError> {
    let path = dir.join("benchmark.csv");
    let mut buf = csv_meta_header(meta).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["setting_id", "nep", "emotion", "diversity", "length", "markers", "overall"])
            .map_err(csv_err(&path))?;
        for row in &ranking.rows {
            let mut record = vec![row.setting_id.clone()];
            for dim in Dimension::ALL {
                let score = row
                    .scores
                    .get(&dim)
                    .map(|s| s.similarity)
                    .unwrap_or(f64::NAN);
                record.push(full(score));
            }
            record.push(full(row.overall));
            w.write_record(&record).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    write_file(&path, &buf)?;
    Ok(path)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(source),
    }
}

/// Per-setting score detail, written under `scores/`.
pub fn write_setting_scores(
    dir: &Path,
    meta: &ReportMeta,
    row: &crate::alignment::BenchmarkRow,
) -> Result<PathBuf, ReportError> {
    #[derive(Serialize)]
    struct SettingReport<'a> {
        meta: &'a ReportMeta,
        #[serde(flatten)]
        row: &'a crate::alignment::BenchmarkRow,
    }
    let path = dir.join("scores").join(format!("{}.json", row.setting_id));
    write_json(&path, "setting scores", &SettingReport { meta, row })?;
    Ok(path)
}

/// Turn-by-turn label distribution as plot-ready CSV rows
/// (turn, label, proportion, support).
pub fn write_progression_csv(
    dir: &Path,
    meta: &ReportMeta,
    dimension: Dimension,
    setting_id: &str,
    series: &LabelProgressionSeries,
) -> Result<PathBuf, ReportError> {
    let dim_slug = match dimension {
        Dimension::Nep => "nep",
        Dimension::Emotion => "emotion",
        other => {
            return Err(ReportError::Serialise {
                what: "progression",
                source: serde_json::Error::io(std::io::Error::other(format!(
                    "{other} has no progression series"
                ))),
            })
        }
    };
    let path = dir
        .join("progression")
        .join(format!("{dim_slug}--{setting_id}.csv"));
    let mut buf = csv_meta_header(meta).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["turn", "label", "proportion", "support"])
            .map_err(csv_err(&path))?;
        for (i, turn) in series.turns.iter().enumerate() {
            for (label, proportion) in series.label_space.iter().zip(&turn.proportions) {
                w.write_record([
                    (i + 1).to_string(),
                    label.clone(),
                    full(*proportion),
                    turn.support.to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    write_file(&path, &buf)?;
    Ok(path)
}

pub fn write_mtld_distribution(
    dir: &Path,
    meta: &ReportMeta,
    rows: &[MtldDistributionRow],
) -> Result<PathBuf, ReportError> {
    let path = dir.join("mtld_distribution.csv");
    let mut buf = csv_meta_header(meta).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["setting_id", "conversation_id", "mtld", "token_count", "included"])
            .map_err(csv_err(&path))?;
        for row in rows {
            w.write_record([
                row.setting_id.clone(),
                row.conversation_id.clone(),
                full(row.score),
                row.token_count.to_string(),
                row.included.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    write_file(&path, &buf)?;
    Ok(path)
}

pub fn write_agreement_json(
    dir: &Path,
    meta: &ReportMeta,
    tasks: &[TaskAgreement],
) -> Result<PathBuf, ReportError> {
    let path = dir.join("agreement.json");
    let report = AgreementReport {
        meta: meta.clone(),
        tasks: tasks.to_vec(),
    };
    write_json(&path, "agreement report", &report)?;
    Ok(path)
}
