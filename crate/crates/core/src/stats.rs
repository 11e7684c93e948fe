//! Spatial neighborhoods and Pearson correlation between locations.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{squared_distance, LocationGrid};
use crate::error::{Error, Result};
use crate::report::CellTag;

pub const DEFAULT_NEIGHBORS: usize = 9;

/// For every location, its `k` nearest other locations ordered by distance,
/// ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborMap {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
}

impl NeighborMap {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform bucket grid over the x-y plane.
struct Buckets {
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    cells: Vec<Vec<usize>>,
}

impl Buckets {
    fn new(grid: &LocationGrid) -> Self {
        let pos = &grid.positions;
        let lo = [
            pos.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
            pos.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
        ];
        let hi = [
            pos.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
            pos.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
        ];
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let fallback = if extent > 0.0 {
            extent / (pos.len() as f64).sqrt()
        } else {
            1.0
        };
        let cell = if grid.spacing > 0.0 && grid.spacing.is_finite() && extent / grid.spacing < 1e6
        {
            grid.spacing
        } else {
            fallback
        };
        let dims = [
            ((hi[0] - lo[0]) / cell).floor() as usize + 1,
            ((hi[1] - lo[1]) / cell).floor() as usize + 1,
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1]];
        let mut out = Self {
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (i, p) in pos.iter().enumerate() {
            let [cx, cy] = out.cell_of(p[0], p[1]);
            cells[cy * dims[0] + cx].push(i);
        }
        out.cells = cells;
        out
    }

    fn cell_of(&self, x: f64, y: f64) -> [usize; 2] {
        let cx = (((x - self.origin[0]) / self.cell).floor() as usize).min(self.dims[0] - 1);
        let cy = (((y - self.origin[1]) / self.cell).floor() as usize).min(self.dims[1] - 1);
        [cx, cy]
    }

    /// Indices in cells at Chebyshev ring distance `r` around `center`.
    fn ring(&self, center: [usize; 2], r: usize, out: &mut Vec<usize>) {
        let [cx, cy] = [center[0] as isize, center[1] as isize];
        let r = r as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs() != r && dy.abs() != r {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= self.dims[0] as isize || y >= self.dims[1] as isize {
                    continue;
                }
                out.extend_from_slice(&self.cells[y as usize * self.dims[0] + x as usize]);
            }
        }
    }
}

/// Exact k-nearest-neighbor lists under 3-D Euclidean distance.
///
/// Searches outward ring by ring over an x-y bucket grid; a ring at
/// Chebyshev distance `r + 1` cannot hold a point closer than `r * cell` in
/// the plane, which bounds the search.
pub fn knn(grid: &LocationGrid, k: usize) -> Result<NeighborMap> {
    let n = grid.len();
    if k < 1 || k >= n {
        return Err(Error::Argument(format!(
            "need 1 <= k < N, got k = {k} with N = {n}"
        )));
    }
    let buckets = Buckets::new(grid);
    let max_ring = buckets.dims[0].max(buckets.dims[1]);
    let indices = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &grid.positions[i];
            let center = buckets.cell_of(p[0], p[1]);
            let mut found: Vec<(f64, usize)> = Vec::new();
            let mut ring = Vec::new();
            for r in 0..=max_ring {
                ring.clear();
                buckets.ring(center, r, &mut ring);
                found.extend(
                    ring.iter()
                        .filter(|&&j| j != i)
                        .map(|&j| (squared_distance(p, &grid.positions[j]), j)),
                );
                if found.len() >= k {
                    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    found.truncate(k);
                    let bound = r as f64 * buckets.cell;
                    if found[k - 1].0 < bound * bound {
                        break;
                    }
                }
            }
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            found.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborMap { k, indices })
}

/// Sample Pearson correlation of two real vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Modulus of the complex correlation coefficient.
pub fn complex_corr_modulus(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<Complex64>() / n;
    let mb = b.iter().sum::<Complex64>() / n;
    let mut sab = Complex64::new(0.0, 0.0);
    let (mut saa, mut sbb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db.conj();
        saa += da.norm_sqr();
        sbb += db.norm_sqr();
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab.norm() / (saa * sbb).sqrt()).min(1.0))
}

/// Per-subcarrier magnitudes of a residual row.
pub fn residual_features(z_row: &[Complex64]) -> Vec<f64> {
    z_row.iter().map(|z| z.norm()).collect()
}

/// How a pair of complex rows is reduced to a correlation value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrFeature {
    /// Pearson correlation of the per-subcarrier magnitudes.
    #[default]
    Magnitude,
    /// Modulus of the complex correlation coefficient.
    ComplexModulus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCorr {
    pub n1: usize,
    pub n2: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrReport {
    pub per_pair: Vec<PairCorr>,
    /// Mean of |rho| over the pairs in `per_pair`.
    pub mean_abs_rho: f64,
    /// Pairs skipped because a row was constant.
    pub undefined_pairs: usize,
    pub tag: Option<CellTag>,
}

fn rows(m: &DMatrix<Complex64>) -> Vec<Vec<Complex64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn mean_neighbor_corr(residual: &DMatrix<Complex64>, nmap: &NeighborMap) -> Result<CorrReport> {
    mean_neighbor_corr_with(residual, nmap, CorrFeature::Magnitude)
}

/// Correlation between every location and each of its neighbors.
pub fn mean_neighbor_corr_with(
    residual: &DMatrix<Complex64>,
    nmap: &NeighborMap,
    feature: CorrFeature,
) -> Result<CorrReport> {
    if residual.nrows() != nmap.len() {
        return Err(Error::Argument(format!(
            "residual has {} rows but the neighbor map covers {} locations",
            residual.nrows(),
            nmap.len()
        )));
    }
    let rows = rows(residual);
    let magnitudes: Vec<Vec<f64>> = rows.iter().map(|r| residual_features(r)).collect();

    let per_location: Vec<Vec<Result<PairCorr>>> = nmap
        .indices
        .par_iter()
        .enumerate()
        .map(|(n1, neighbors)| {
            neighbors
                .iter()
                .map(|&n2| {
                    let rho = match feature {
                        CorrFeature::Magnitude => pearson(&magnitudes[n1], &magnitudes[n2]),
                        CorrFeature::ComplexModulus => complex_corr_modulus(&rows[n1], &rows[n2]),
                    }?;
                    Ok(PairCorr { n1, n2, rho })
                })
                .collect()
        })
        .collect();

    let mut per_pair = Vec::new();
    let mut undefined_pairs = 0;
    for result in per_location.into_iter().flatten() {
        match result {
            Ok(pair) => per_pair.push(pair),
            Err(Error::UndefinedCorrelation(_)) => undefined_pairs += 1,
            Err(e) => return Err(e),
        }
    }
    if per_pair.is_empty() {
        return Err(Error::EmptyReport(format!(
            "all {undefined_pairs} neighbor pairs have undefined correlation"
        )));
    }
    let mean_abs_rho = per_pair.iter().map(|p| p.rho.abs()).sum::<f64>() / per_pair.len() as f64;
    Ok(CorrReport {
        per_pair,
        mean_abs_rho,
        undefined_pairs,
        tag: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_grid, GridSpec};
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_knn(grid: &LocationGrid, k: usize) -> Vec<Vec<usize>> {
        let n = grid.len();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (squared_distance(&grid.positions[i], &grid.positions[j]), j))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn three_by_three_center() {
        let g = build_grid([0.0, 20.0], [0.0, 20.0], 10.0, 0.0, [0.0, 0.0, 10.0]).unwrap();
        let nm = knn(&g, 8).unwrap();
        // center is index 4; axis neighbors 1, 3, 5, 7 then diagonals 0, 2, 6, 8
        assert_eq!(nm.indices[4], vec![1, 3, 5, 7, 0, 2, 6, 8]);
    }

    #[test]
    fn two_points() {
        let g = build_grid([0.0, 10.0], [0.0, 0.0], 10.0, 0.0, [0.0; 3]).unwrap();
        let nm = knn(&g, 1).unwrap();
        assert_eq!(nm.indices, vec![vec![1], vec![0]]);
    }

    #[test]
    fn default_grid_interior_points() {
        let g = GridSpec::default().build().unwrap();
        let nm = knn(&g, 9).unwrap();
        assert_eq!(nm.indices, brute_knn(&g, 9));
        // Interior point (x index 5, y index 7): 8-ring, then the lowest-index
        // point at distance 20, which is two rows down.
        let i = 7 * 20 + 5;
        let list = &nm.indices[i];
        let ring = [i - 20, i - 1, i + 1, i + 20, i - 21, i - 19, i + 19, i + 21];
        assert_eq!(&list[..4], &ring[..4]);
        assert_eq!(&list[4..8], &ring[4..]);
        assert_eq!(list[8], i - 40);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let g = build_grid([0.0, 10.0], [0.0, 0.0], 10.0, 0.0, [0.0; 3]).unwrap();
        assert!(matches!(knn(&g, 2), Err(Error::Argument(_))));
        assert!(matches!(knn(&g, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn knn_matches_brute_force_on_scattered_points() {
        let mut rng = rng::stream(77, &[]);
        use rand::Rng;
        for trial in 0..5 {
            let n = 200 + trial * 150;
            let mut positions = Vec::new();
            for _ in 0..n {
                positions.push([
                    (rng.random::<f64>() * 300.0).round(),
                    (rng.random::<f64>() * 120.0).round() - 60.0,
                    (rng.random::<f64>() * 4.0).round(),
                ]);
            }
            positions.sort_by(|a, b| a.partial_cmp(b).unwrap());
            positions.dedup();
            let g = LocationGrid::from_positions(positions, 7.0, [0.0; 3]).unwrap();
            for k in [1, 4, 9, 25] {
                assert_eq!(
                    knn(&g, k).unwrap().indices,
                    brute_knn(&g, k),
                    "trial {trial} k {k}"
                );
            }
        }
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Argument(_))));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn features_are_magnitudes() {
        let z = vec![Complex64::new(3.0, 4.0); 4];
        assert_eq!(residual_features(&z), vec![5.0; 4]);
        assert_eq!(
            residual_features(&[Complex64::new(0.0, 0.0); 3]),
            vec![0.0; 3]
        );
        let real = [Complex64::new(-2.0, 0.0), Complex64::new(1.5, 0.0)];
        assert_eq!(residual_features(&real), vec![2.0, 1.5]);
    }

    #[test]
    fn identical_rows_are_fully_correlated() {
        let g = GridSpec::default().build().unwrap();
        let nm = knn(&g, 9).unwrap();
        let row: Vec<Complex64> = (0..32).map(|m| Complex64::new(m as f64, 1.0)).collect();
        let z = DMatrix::from_fn(400, 32, |_, m| row[m]);
        let rep = mean_neighbor_corr(&z, &nm).unwrap();
        assert!((rep.mean_abs_rho - 1.0).abs() < 1e-12);
        assert_eq!(rep.per_pair.len(), 400 * 9);
        let rep = mean_neighbor_corr_with(&z, &nm, CorrFeature::ComplexModulus).unwrap();
        assert!((rep.mean_abs_rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_rows_have_small_mean_correlation() {
        let g = GridSpec::default().build().unwrap();
        let nm = knn(&g, 9).unwrap();
        let mut rng = rng::stream(5, &[]);
        let z = DMatrix::from_fn(400, 32, |_, _| {
            Complex64::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        });
        let rep = mean_neighbor_corr(&z, &nm).unwrap();
        assert!(rep.mean_abs_rho < 0.25, "{}", rep.mean_abs_rho);
        assert!(rep.mean_abs_rho > 0.08, "{}", rep.mean_abs_rho);
    }

    #[test]
    fn constant_rows_are_excluded() {
        let g = build_grid([0.0, 20.0], [0.0, 0.0], 10.0, 0.0, [0.0; 3]).unwrap();
        let nm = knn(&g, 1).unwrap();
        let mut z = DMatrix::from_element(3, 4, Complex64::new(1.0, 0.0));
        assert!(matches!(
            mean_neighbor_corr(&z, &nm),
            Err(Error::EmptyReport(_))
        ));
        for m in 0..4 {
            z[(0, m)] = Complex64::new(m as f64, 0.0);
            z[(1, m)] = Complex64::new((m * m) as f64, 0.0);
        }
        let rep = mean_neighbor_corr(&z, &nm).unwrap();
        // 0<->1 both ways defined, 2 -> 1 undefined (row 2 constant)
        assert_eq!(rep.per_pair.len(), 2);
        assert_eq!(rep.undefined_pairs, 1);
        assert!(matches!(
            mean_neighbor_corr(&DMatrix::from_element(2, 4, Complex64::new(0.0, 0.0)), &nm),
            Err(Error::Argument(_))
        ));
    }
}
