//! Sweeps over SNR, subcarrier spacing and retained-component count, with
//! table and figure data written as CSV.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelConfig, GridSpec, LocationGrid, User};
use crate::dhsic::{self, rejection_fraction, KernelSpec, NeighborhoodVariables};
use crate::error::{Error, Result};
use crate::io::{self, Scene};
use crate::pca::{fit_pca, residuals, PcaModel};
use crate::report::{parse_sig, sig6, Stage};
use crate::rng;
use crate::stats::{knn, mean_neighbor_corr_with, CorrFeature, NeighborMap, DEFAULT_NEIGHBORS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    /// Base channel parameters; `scs_hz` and `seed` are overridden per cell.
    pub channel: ChannelConfig,
    pub snr_list: Vec<f64>,
    pub scs_list: Vec<f64>,
    pub d_hat_list: Vec<usize>,
    pub k_neighbors: usize,
    pub alpha: f64,
    pub permutations: usize,
    pub master_seed: u64,
    /// Independent scenes averaged per cell.
    pub trials: usize,
    /// Whose estimate is decomposed.
    pub user: User,
    pub neighborhood: NeighborhoodVariables,
    pub kernel: KernelSpec,
    pub corr_feature: CorrFeature,
    /// Also run the joint subcarrier test for every cell.
    pub subcarrier_test: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            channel: ChannelConfig::default(),
            snr_list: vec![10.0, 30.0, 50.0],
            scs_list: vec![15e3, 30e3, 60e3, 100e3, 1000e3],
            d_hat_list: vec![1, 2, 3, 4, 8],
            k_neighbors: DEFAULT_NEIGHBORS,
            alpha: 0.05,
            permutations: 100,
            master_seed: 0,
            trials: 1,
            user: User::B,
            neighborhood: NeighborhoodVariables::default(),
            kernel: KernelSpec::default(),
            corr_feature: CorrFeature::default(),
            subcarrier_test: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<LocationGrid> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.snr_list.is_empty() || self.scs_list.is_empty() || self.d_hat_list.is_empty() {
            return bad("snr_list, scs_list and d_hat_list must be non-empty".into());
        }
        if self
            .snr_list
            .iter()
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return bad("snr values must be numbers or +inf".into());
        }
        if let Some(&d) = self
            .d_hat_list
            .iter()
            .find(|&&d| d > self.channel.subcarriers)
        {
            return bad(format!(
                "d_hat {d} exceeds the {} subcarriers",
                self.channel.subcarriers
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.permutations < 1 || self.trials < 1 {
            return bad("permutations and trials must be at least 1".into());
        }
        let min_k = match self.neighborhood {
            NeighborhoodVariables::CenterAndNeighbors => 1,
            NeighborhoodVariables::NeighborsOnly => 2,
        };
        if self.k_neighbors < min_k {
            return bad(format!("k_neighbors must be at least {min_k}"));
        }
        for &scs in &self.scs_list {
            ChannelConfig {
                scs_hz: scs,
                ..self.channel.clone()
            }
            .validate()?;
        }
        let grid = self.grid.build()?;
        if self.k_neighbors >= grid.len() {
            return bad(format!(
                "k_neighbors = {} needs more than {} locations",
                self.k_neighbors,
                grid.len()
            ));
        }
        Ok(grid)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn scene_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.master_seed, &[rng::tag("scene"), trial as u64])
    }

    pub fn noise_seed(&self, snr_db: f64, scs_hz: f64, trial: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[
                rng::tag("noise"),
                snr_db.to_bits(),
                scs_hz.to_bits(),
                trial as u64,
            ],
        )
    }

    pub fn stages(&self) -> Vec<Stage> {
        std::iter::once(Stage::Observed)
            .chain(self.d_hat_list.iter().map(|&d| Stage::Residual(d)))
            .collect()
    }
}

fn stage_label(stage: Stage) -> u64 {
    match stage {
        Stage::Observed => 0,
        Stage::Residual(d) => d as u64 + 1,
    }
}

/// The matrix a stage is evaluated on: the raw observation, or the residual
/// after removing `d` components.
pub fn stage_matrix(
    observed: &DMatrix<Complex64>,
    model: &PcaModel,
    stage: Stage,
) -> Result<DMatrix<Complex64>> {
    match stage {
        Stage::Observed => Ok(observed.clone()),
        Stage::Residual(d) => Ok(residuals(observed, model, d)?.residual),
    }
}

/// One averaged cell of a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub snr_db: f64,
    pub scs_hz: f64,
    pub stage: Stage,
    /// NaN when every trial of the cell failed.
    pub value: f64,
    /// Trials that contributed to `value`.
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub snr_db: f64,
    pub scs_hz: f64,
    pub stage: Stage,
    pub statistic: f64,
    pub critical_value: f64,
    pub reject_fraction: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub snr_db: f64,
    pub scs_hz: f64,
    pub stage: Stage,
    pub trial: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
    pub errors: Vec<CellError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub table1_rows: Vec<TableRow>,
    pub table2_rows: Vec<TableRow>,
    pub fig2_rows: Vec<Fig2Row>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
struct StageMetrics {
    corr: f64,
    rejection: f64,
    subcarrier: Option<(f64, f64, bool)>,
}

/// Error kind and message.
type Failure = (&'static str, String);

struct CellRun {
    trial: usize,
    snr_db: f64,
    scs_hz: f64,
    stages: Vec<(Stage, std::result::Result<StageMetrics, Failure>)>,
}

fn failure(e: Error) -> Failure {
    (e.kind(), e.to_string())
}

fn stage_metrics(
    cfg: &ExperimentConfig,
    nmap: &NeighborMap,
    observed: &DMatrix<Complex64>,
    model: &PcaModel,
    stage: Stage,
    seed: u64,
) -> Result<StageMetrics> {
    let z = stage_matrix(observed, model, stage)?;
    let corr = mean_neighbor_corr_with(&z, nmap, cfg.corr_feature)?.mean_abs_rho;
    let label = stage_label(stage);
    let tests = dhsic::neighborhood_tests(
        &z,
        nmap,
        &cfg.kernel,
        cfg.alpha,
        cfg.permutations,
        rng::derive_seed(seed, &[rng::tag("neighborhood"), label]),
        cfg.neighborhood,
    )?;
    let subcarrier = if cfg.subcarrier_test {
        let t = dhsic::subcarrier_test(
            &z,
            &cfg.kernel,
            cfg.alpha,
            cfg.permutations,
            rng::derive_seed(seed, &[rng::tag("subcarrier"), label]),
        )?;
        Some((t.statistic, t.critical_value, t.reject))
    } else {
        None
    };
    Ok(StageMetrics {
        corr,
        rejection: rejection_fraction(&tests),
        subcarrier,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    grid: &LocationGrid,
    nmap: &NeighborMap,
    trial: usize,
    scs_hz: f64,
    snr_db: f64,
) -> CellRun {
    let stages = cfg.stages();
    let channel = ChannelConfig {
        scs_hz,
        seed: cfg.scene_seed(trial),
        ..cfg.channel.clone()
    };
    let noise_seed = cfg.noise_seed(snr_db, scs_hz, trial);
    let prepared = Scene::synthesize(grid.clone(), channel, snr_db, noise_seed).and_then(|scene| {
        let observed = scene.observed(cfg.user).clone();
        let model = fit_pca(&observed)?;
        Ok((observed, model))
    });
    let stages = match prepared {
        Ok((observed, model)) => stages
            .iter()
            .map(|&s| {
                (
                    s,
                    stage_metrics(cfg, nmap, &observed, &model, s, noise_seed).map_err(failure),
                )
            })
            .collect(),
        Err(e) => {
            let f = failure(e);
            stages.iter().map(|&s| (s, Err(f.clone()))).collect()
        }
    };
    CellRun {
        trial,
        snr_db,
        scs_hz,
        stages,
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs every (snr, scs) cell for every trial and averages over trials.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let grid = cfg.validate()?;
    let nmap = knn(&grid, cfg.k_neighbors)?;

    let mut jobs = Vec::new();
    for trial in 0..cfg.trials {
        for &snr in &cfg.snr_list {
            for &scs in &cfg.scs_list {
                jobs.push((trial, snr, scs));
            }
        }
    }
    let runs: Vec<CellRun> = jobs
        .par_iter()
        .map(|&(trial, snr, scs)| run_cell(cfg, &grid, &nmap, trial, scs, snr))
        .collect();

    let mut errors = Vec::new();
    for run in &runs {
        for (stage, r) in &run.stages {
            if let Err((kind, message)) = r {
                errors.push(CellError {
                    snr_db: run.snr_db,
                    scs_hz: run.scs_hz,
                    stage: *stage,
                    trial: run.trial,
                    kind: (*kind).into(),
                    message: message.clone(),
                });
            }
        }
    }

    let mut table1_rows = Vec::new();
    let mut table2_rows = Vec::new();
    let mut fig2_rows = Vec::new();
    for &snr in &cfg.snr_list {
        for &scs in &cfg.scs_list {
            for (si, &stage) in cfg.stages().iter().enumerate() {
                let ok: Vec<StageMetrics> = runs
                    .iter()
                    .filter(|r| {
                        r.snr_db.to_bits() == snr.to_bits() && r.scs_hz.to_bits() == scs.to_bits()
                    })
                    .filter_map(|r| r.stages[si].1.as_ref().ok().copied())
                    .collect();
                let trials = ok.len();
                let corr: Vec<f64> = ok.iter().map(|m| m.corr).collect();
                let rej: Vec<f64> = ok.iter().map(|m| m.rejection).collect();
                table1_rows.push(TableRow {
                    snr_db: snr,
                    scs_hz: scs,
                    stage,
                    value: mean(&corr),
                    trials,
                });
                table2_rows.push(TableRow {
                    snr_db: snr,
                    scs_hz: scs,
                    stage,
                    value: mean(&rej),
                    trials,
                });
                if cfg.subcarrier_test {
                    let sub: Vec<(f64, f64, bool)> =
                        ok.iter().filter_map(|m| m.subcarrier).collect();
                    let stats: Vec<f64> = sub.iter().map(|s| s.0).collect();
                    let cvs: Vec<f64> = sub.iter().map(|s| s.1).collect();
                    let rejects: Vec<f64> =
                        sub.iter().map(|s| if s.2 { 1.0 } else { 0.0 }).collect();
                    fig2_rows.push(Fig2Row {
                        snr_db: snr,
                        scs_hz: scs,
                        stage,
                        statistic: mean(&stats),
                        critical_value: mean(&cvs),
                        reject_fraction: mean(&rejects),
                        trials: sub.len(),
                    });
                }
            }
        }
    }

    Ok(SweepResult {
        table1_rows,
        table2_rows,
        fig2_rows,
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            master_seed: cfg.master_seed,
            timestamp: timestamp(),
            errors,
        },
    })
}

/// Looks up a cell of a table.
pub fn cell(rows: &[TableRow], snr_db: f64, scs_hz: f64, stage: Stage) -> Option<&TableRow> {
    rows.iter()
        .find(|r| r.snr_db == snr_db && r.scs_hz == scs_hz && r.stage == stage)
}

pub const TABLE1_HEADER: [&str; 5] = ["snr_db", "scs_hz", "d_hat", "mean_abs_rho", "trials"];
pub const TABLE2_HEADER: [&str; 5] = ["snr_db", "scs_hz", "d_hat", "rejection_rate", "trials"];
pub const FIG2_HEADER: [&str; 9] = [
    "snr_db",
    "scs_hz",
    "d_hat",
    "statistic",
    "critical_value",
    "ln_statistic",
    "ln_critical_value",
    "reject_fraction",
    "trials",
];

fn write_table(path: &Path, header: [&str; 5], rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record([
            sig6(r.snr_db),
            sig6(r.scs_hz),
            r.stage.to_string(),
            sig6(r.value),
            r.trials.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_fig2(path: &Path, rows: &[Fig2Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(FIG2_HEADER)?;
    for r in rows {
        w.write_record([
            sig6(r.snr_db),
            sig6(r.scs_hz),
            r.stage.to_string(),
            sig6(r.statistic),
            sig6(r.critical_value),
            sig6(r.statistic.ln()),
            sig6(r.critical_value.ln()),
            sig6(r.reject_fraction),
            r.trials.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `table1.csv`, `table2.csv`, `fig2.csv` and `provenance.json` into
/// `out_dir` and returns their paths.
pub fn emit_reports(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths: Vec<PathBuf> = ["table1.csv", "table2.csv", "fig2.csv", "provenance.json"]
        .iter()
        .map(|f| out_dir.join(f))
        .collect();
    write_table(&paths[0], TABLE1_HEADER, &result.table1_rows)?;
    write_table(&paths[1], TABLE2_HEADER, &result.table2_rows)?;
    write_fig2(&paths[2], &result.fig2_rows)?;
    io::write_json(&paths[3], &result.provenance)?;
    Ok(paths)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn field(rec: &csv::StringRecord, i: usize) -> Result<&str> {
    rec.get(i)
        .ok_or_else(|| Error::Data(format!("missing column {i}")))
}

fn parse_count(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Data(format!("not a count: {s:?}")))
}

/// Reads a file written for `table1_rows` or `table2_rows`.
pub fn read_table(path: &Path) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec?;
        rows.push(TableRow {
            snr_db: parse_sig(field(&rec, 0)?)?,
            scs_hz: parse_sig(field(&rec, 1)?)?,
            stage: field(&rec, 2)?.parse()?,
            value: parse_sig(field(&rec, 3)?)?,
            trials: parse_count(field(&rec, 4)?)?,
        });
    }
    Ok(rows)
}

pub fn read_fig2(path: &Path) -> Result<Vec<Fig2Row>> {
    let mut rows = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec?;
        rows.push(Fig2Row {
            snr_db: parse_sig(field(&rec, 0)?)?,
            scs_hz: parse_sig(field(&rec, 1)?)?,
            stage: field(&rec, 2)?.parse()?,
            statistic: parse_sig(field(&rec, 3)?)?,
            critical_value: parse_sig(field(&rec, 4)?)?,
            reject_fraction: parse_sig(field(&rec, 7)?)?,
            trials: parse_count(field(&rec, 8)?)?,
        });
    }
    Ok(rows)
}
