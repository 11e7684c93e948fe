use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use csi_pls::channel::{ChannelConfig, GridSpec, User};
use csi_pls::dhsic::{self, KernelSpec, NeighborhoodVariables, TestKind, TestRow};
use csi_pls::harness::{emit_reports, run_sweep, stage_matrix, ExperimentConfig};
use csi_pls::io::{self, Scene};
use csi_pls::pca::{fit_pca, residuals};
use csi_pls::report::{CellTag, Stage};
use csi_pls::rng;
use csi_pls::stats::{knn, mean_neighbor_corr_with, CorrFeature, DEFAULT_NEIGHBORS};
use csi_pls::{Error, Result};

#[derive(Parser)]
#[command(
    name = "csi-pls",
    version,
    about = "Synthetic CSI, PCA residuals and dHSIC independence tests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene and write it as JSON.
    Scene {
        /// JSON file with optional `grid` and `channel` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pilot SNR in dB; `inf` for noiseless estimates.
        #[arg(long, default_value_t = 50.0)]
        snr: f64,
        #[arg(long)]
        scs: Option<f64>,
        #[arg(long)]
        subcarriers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA on a scene's observation and write the decomposition.
    Decompose {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        d_hat: usize,
        #[arg(long, default_value = "b")]
        user: User,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-component explained variance.
        #[arg(long)]
        variance_csv: Option<PathBuf>,
    },
    /// Mean absolute neighbor correlation of one table cell.
    Corr {
        #[arg(long)]
        scene: PathBuf,
        /// Retained components; omit for the observed channel.
        #[arg(long)]
        d_hat: Option<usize>,
        #[arg(long, default_value = "b")]
        user: User,
        #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
        neighbors: usize,
        #[arg(long, value_enum, default_value_t = FeatureArg::Magnitude)]
        feature: FeatureArg,
        /// Write every (location, neighbor) pair here.
        #[arg(long)]
        pairs_csv: Option<PathBuf>,
    },
    /// Neighborhood rejection rate or joint subcarrier test.
    Dhsic {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        d_hat: Option<usize>,
        #[arg(long, default_value = "b")]
        user: User,
        #[arg(long, value_enum, default_value_t = KindArg::Neighborhood)]
        kind: KindArg,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        perms: usize,
        #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
        neighbors: usize,
        /// Leave the center location out of each neighborhood test.
        #[arg(long)]
        neighbors_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-test CSV rows; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full campaign over SNR, subcarrier spacing and retained components.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `master_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Magnitude,
    ComplexModulus,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Neighborhood,
    Subcarrier,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct SceneConfig {
    grid: GridSpec,
    channel: ChannelConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn stage_of(d_hat: Option<usize>) -> Stage {
    d_hat.map_or(Stage::Observed, Stage::Residual)
}

fn load_stage(
    scene: &Scene,
    user: User,
    stage: Stage,
) -> Result<nalgebra::DMatrix<num_complex::Complex64>> {
    let observed = scene.observed(user);
    let model = fit_pca(observed)?;
    stage_matrix(observed, &model, stage)
}

fn tag(scene: &Scene, stage: Stage) -> CellTag {
    CellTag {
        snr_db: scene.csi.snr_db,
        scs_hz: scene.channel.scs_hz,
        stage,
    }
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Scene {
            config,
            snr,
            scs,
            subcarriers,
            seed,
            out,
        } => {
            let mut cfg: SceneConfig = match config {
                Some(p) => read_json(&p)?,
                None => SceneConfig::default(),
            };
            if let Some(scs) = scs {
                cfg.channel.scs_hz = scs;
            }
            if let Some(m) = subcarriers {
                cfg.channel.subcarriers = m;
            }
            cfg.channel.seed = rng::derive_seed(seed, &[rng::tag("scene")]);
            let noise_seed = rng::derive_seed(seed, &[rng::tag("noise")]);
            let scene = Scene::synthesize(cfg.grid.build()?, cfg.channel, snr, noise_seed)?;
            io::write_scene(&out, &scene)?;
        }
        Command::Decompose {
            scene,
            d_hat,
            user,
            out,
            variance_csv,
        } => {
            let scene = io::read_scene(&scene)?;
            let h = scene.observed(user);
            let model = fit_pca(h)?;
            let dec = residuals(h, &model, d_hat)?;
            io::write_decomposition(&out, &model, &dec)?;
            if let Some(p) = variance_csv {
                let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                io::write_explained_variance(f, &model)?;
            }
        }
        Command::Corr {
            scene,
            d_hat,
            user,
            neighbors,
            feature,
            pairs_csv,
        } => {
            let scene = io::read_scene(&scene)?;
            let stage = stage_of(d_hat);
            let z = load_stage(&scene, user, stage)?;
            let nmap = knn(&scene.grid, neighbors)?;
            let feature = match feature {
                FeatureArg::Magnitude => CorrFeature::Magnitude,
                FeatureArg::ComplexModulus => CorrFeature::ComplexModulus,
            };
            let mut report = mean_neighbor_corr_with(&z, &nmap, feature)?;
            report.tag = Some(tag(&scene, stage));
            let reports = [report];
            if let Some(p) = pairs_csv {
                let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                io::write_corr_pairs(f, &reports)?;
            }
            io::write_corr_summary(stdout.lock(), &reports)?;
        }
        Command::Dhsic {
            scene,
            d_hat,
            user,
            kind,
            alpha,
            perms,
            neighbors,
            neighbors_only,
            seed,
            out,
        } => {
            let scene = io::read_scene(&scene)?;
            let stage = stage_of(d_hat);
            let z = load_stage(&scene, user, stage)?;
            let spec = KernelSpec::default();
            let cell = tag(&scene, stage);
            let rows: Vec<TestRow> = match kind {
                KindArg::Neighborhood => {
                    let nmap = knn(&scene.grid, neighbors)?;
                    let vars = if neighbors_only {
                        NeighborhoodVariables::NeighborsOnly
                    } else {
                        NeighborhoodVariables::CenterAndNeighbors
                    };
                    let tests =
                        dhsic::neighborhood_tests(&z, &nmap, &spec, alpha, perms, seed, vars)?;
                    eprintln!("rejection_rate={}", dhsic::rejection_fraction(&tests));
                    tests
                        .into_iter()
                        .enumerate()
                        .map(|(i, test)| TestRow {
                            tag: cell,
                            kind: TestKind::Neighborhood,
                            location: Some(i),
                            test,
                        })
                        .collect()
                }
                KindArg::Subcarrier => {
                    let mut test = dhsic::subcarrier_test(&z, &spec, alpha, perms, seed)?;
                    test.resample_values = None;
                    vec![TestRow {
                        tag: cell,
                        kind: TestKind::Subcarrier,
                        location: None,
                        test,
                    }]
                }
            };
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                    dhsic::write_test_rows(f, &rows)?;
                }
                None => dhsic::write_test_rows(stdout.lock(), &rows)?,
            }
        }
        Command::Sweep { config, out, seed } => {
            let mut cfg: ExperimentConfig = match config {
                Some(p) => read_json(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let result = run_sweep(&cfg)?;
            emit_reports(&result, &out)?;
            if !result.provenance.errors.is_empty() {
                eprintln!(
                    "{} cell errors, see provenance.json",
                    result.provenance.errors.len()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body =
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            let _ = writeln!(std::io::stderr(), "{body}");
            ExitCode::FAILURE
        }
    }
}
