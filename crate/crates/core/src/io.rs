//! JSON and CSV interchange for scenes, decompositions and correlation
//! reports. Field names are documented in `docs/scene-format.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_csi, ChannelConfig, CsiSet, LocationGrid, User};
use crate::error::{Error, Result};
use crate::pca::{Decomposition, PcaModel};
use crate::report::{sig6, CellTag};
use crate::stats::CorrReport;

pub const SCENE_FORMAT: &str = "csi-pls/scene/v1";
pub const DECOMPOSITION_FORMAT: &str = "csi-pls/decomposition/v1";

/// Row-major complex matrix, each entry `[re, im]`.
pub type ComplexRows = Vec<Vec<[f64; 2]>>;

pub fn to_rows(m: &DMatrix<Complex64>) -> ComplexRows {
    m.row_iter()
        .map(|r| r.iter().map(|z| [z.re, z.im]).collect())
        .collect()
}

pub fn from_rows(rows: &ComplexRows) -> Result<DMatrix<Complex64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Data(
            "complex array rows have unequal lengths".into(),
        ));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| {
        let [re, im] = rows[i][j];
        Complex64::new(re, im)
    }))
}

/// A synthesized scene: geometry, channel parameters, true channel and both
/// users' estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: LocationGrid,
    pub channel: ChannelConfig,
    pub noise_seed: u64,
    pub csi: CsiSet,
}

impl Scene {
    pub fn synthesize(
        grid: LocationGrid,
        channel: ChannelConfig,
        snr_db: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        let true_csi = synthesize_csi(&grid, &channel)?;
        let csi = CsiSet::new(true_csi, snr_db, noise_seed)?;
        Ok(Self {
            grid,
            channel,
            noise_seed,
            csi,
        })
    }

    pub fn observed(&self, user: User) -> &DMatrix<Complex64> {
        self.csi.observed(user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedPair {
    pub a: ComplexRows,
    pub b: ComplexRows,
}

/// On-disk form of a [`Scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: String,
    pub grid: LocationGrid,
    pub channel: ChannelConfig,
    /// `null` for a noiseless scene.
    pub snr_db: Option<f64>,
    pub noise_variance: f64,
    pub noise_seed: u64,
    pub true_csi: ComplexRows,
    pub observed: ObservedPair,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        Self {
            format: SCENE_FORMAT.into(),
            grid: s.grid.clone(),
            channel: s.channel.clone(),
            snr_db: s.csi.snr_db.is_finite().then_some(s.csi.snr_db),
            noise_variance: s.csi.noise_variance,
            noise_seed: s.noise_seed,
            true_csi: to_rows(&s.csi.true_csi),
            observed: ObservedPair {
                a: to_rows(&s.csi.observed_a),
                b: to_rows(&s.csi.observed_b),
            },
        }
    }
}

impl TryFrom<SceneFile> for Scene {
    type Error = Error;

    fn try_from(f: SceneFile) -> Result<Self> {
        if f.format != SCENE_FORMAT {
            return Err(Error::Data(format!(
                "expected format {SCENE_FORMAT:?}, found {:?}",
                f.format
            )));
        }
        let true_csi = from_rows(&f.true_csi)?;
        let observed_a = from_rows(&f.observed.a)?;
        let observed_b = from_rows(&f.observed.b)?;
        let shape = true_csi.shape();
        if observed_a.shape() != shape || observed_b.shape() != shape {
            return Err(Error::Data(
                "observed arrays do not match the true channel shape".into(),
            ));
        }
        if shape.0 != f.grid.len() {
            return Err(Error::Data(format!(
                "channel has {} rows for {} grid positions",
                shape.0,
                f.grid.len()
            )));
        }
        Ok(Scene {
            grid: f.grid,
            channel: f.channel,
            noise_seed: f.noise_seed,
            csi: CsiSet {
                true_csi,
                observed_a,
                observed_b,
                snr_db: f.snr_db.unwrap_or(f64::INFINITY),
                noise_variance: f.noise_variance,
            },
        })
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, &SceneFile::from(scene))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_json::<SceneFile>(path)?.try_into()
}

/// On-disk form of a fitted model together with one decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFile {
    pub format: String,
    pub d_hat: usize,
    pub mean: Vec<[f64; 2]>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// M x M, column k is eigenvector k.
    pub eigenvectors: ComplexRows,
    pub scores: ComplexRows,
    pub predictable: ComplexRows,
    pub residual: ComplexRows,
}

impl DecompositionFile {
    pub fn new(model: &PcaModel, dec: &Decomposition) -> Self {
        Self {
            format: DECOMPOSITION_FORMAT.into(),
            d_hat: dec.d_hat,
            mean: model.mean.iter().map(|z| [z.re, z.im]).collect(),
            eigenvalues: model.eigenvalues.iter().copied().collect(),
            explained_variance_ratio: model.explained_variance_ratio(),
            eigenvectors: to_rows(&model.eigenvectors),
            scores: to_rows(&dec.scores),
            predictable: to_rows(&dec.predictable),
            residual: to_rows(&dec.residual),
        }
    }
}

pub fn write_decomposition(path: &Path, model: &PcaModel, dec: &Decomposition) -> Result<()> {
    write_json(path, &DecompositionFile::new(model, dec))
}

pub fn read_decomposition(path: &Path) -> Result<DecompositionFile> {
    let f: DecompositionFile = read_json(path)?;
    if f.format != DECOMPOSITION_FORMAT {
        return Err(Error::Data(format!(
            "expected format {DECOMPOSITION_FORMAT:?}, found {:?}",
            f.format
        )));
    }
    Ok(f)
}

fn flush<W: Write>(w: csv::Writer<W>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io("<csv output>", e.into_error()))?
        .flush()
        .map_err(|e| Error::io("<csv output>", e))
}

/// Columns: component, eigenvalue, ratio, cumulative.
pub fn write_explained_variance<W: Write>(out: W, model: &PcaModel) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "eigenvalue", "ratio", "cumulative"])?;
    let mut cumulative = 0.0;
    for (k, (ratio, value)) in model
        .explained_variance_ratio()
        .into_iter()
        .zip(model.eigenvalues.iter())
        .enumerate()
    {
        cumulative += ratio;
        w.write_record([
            (k + 1).to_string(),
            sig6(*value),
            sig6(ratio),
            sig6(cumulative),
        ])?;
    }
    flush(w)
}

fn tag_fields(tag: Option<CellTag>) -> [String; 3] {
    match tag {
        Some(t) => [sig6(t.snr_db), sig6(t.scs_hz), t.stage.to_string()],
        None => [String::new(), String::new(), String::new()],
    }
}

/// Columns: snr_db, scs_hz, d_hat, n1, n2, rho.
pub fn write_corr_pairs<W: Write>(out: W, reports: &[CorrReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snr_db", "scs_hz", "d_hat", "n1", "n2", "rho"])?;
    for r in reports {
        let [snr, scs, stage] = tag_fields(r.tag);
        for p in &r.per_pair {
            w.write_record([
                snr.clone(),
                scs.clone(),
                stage.clone(),
                p.n1.to_string(),
                p.n2.to_string(),
                sig6(p.rho),
            ])?;
        }
    }
    flush(w)
}

/// Columns: snr_db, scs_hz, d_hat, mean_abs_rho, undefined_pairs.
pub fn write_corr_summary<W: Write>(out: W, reports: &[CorrReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "snr_db",
        "scs_hz",
        "d_hat",
        "mean_abs_rho",
        "undefined_pairs",
    ])?;
    for r in reports {
        let [snr, scs, stage] = tag_fields(r.tag);
        w.write_record([
            snr,
            scs,
            stage,
            sig6(r.mean_abs_rho),
            r.undefined_pairs.to_string(),
        ])?;
    }
    flush(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::build_grid;
    use crate::pca::{fit_pca, residuals};

    fn small_scene(snr_db: f64) -> Scene {
        let grid = build_grid([0.0, 20.0], [0.0, 10.0], 10.0, 0.0, [0.0, 0.0, 10.0]).unwrap();
        let channel = ChannelConfig {
            subcarriers: 4,
            ..ChannelConfig::default()
        };
        Scene::synthesize(grid, channel, snr_db, 5).unwrap()
    }

    #[test]
    fn scene_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for snr in [20.0, f64::INFINITY] {
            let scene = small_scene(snr);
            let path = dir.path().join("scene.json");
            write_scene(&path, &scene).unwrap();
            assert_eq!(read_scene(&path).unwrap(), scene);
        }
        let text = std::fs::read_to_string(dir.path().join("scene.json")).unwrap();
        assert!(text.contains("\"snr_db\": null"));
    }

    #[test]
    fn rejects_foreign_documents() {
        let scene = small_scene(10.0);
        let mut f = SceneFile::from(&scene);
        f.format = "other".into();
        assert!(Scene::try_from(f).is_err());
        let mut f = SceneFile::from(&scene);
        f.observed.a.pop();
        assert!(Scene::try_from(f).is_err());
        let mut f = SceneFile::from(&scene);
        f.true_csi[0].pop();
        assert!(Scene::try_from(f).is_err());
    }

    #[test]
    fn decomposition_document() {
        let scene = small_scene(30.0);
        let h = scene.observed(User::B);
        let model = fit_pca(h).unwrap();
        let dec = residuals(h, &model, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("dec.json");
        write_decomposition(&path, &model, &dec).unwrap();
        let back = read_decomposition(&path).unwrap();
        assert_eq!(back.d_hat, 2);
        assert_eq!(from_rows(&back.residual).unwrap(), dec.residual);
        assert_eq!(back.scores.len(), 6);
        assert_eq!(back.scores[0].len(), 2);

        let mut csv_out = Vec::new();
        write_explained_variance(&mut csv_out, &model).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().ends_with(",1"));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_scene(Path::new("/nonexistent/scene.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scene.json"));
    }
}
