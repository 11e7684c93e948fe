//! Joint independence testing with the d-variable Hilbert-Schmidt
//! independence criterion (dHSIC).
//!
//! For `d` variables observed jointly `n` times, with Gaussian-kernel Gram
//! matrices `K^1 .. K^d`, the V-statistic is
//!
//! ```text
//! dHSIC = 1/n^2     sum_{i,j} prod_l K^l_ij
//!       + 1/n^(2d)  prod_l sum_{i,j} K^l_ij
//!       - 2/n^(d+1) sum_i prod_l sum_j K^l_ij
//! ```
//!
//! which is the squared RKHS distance between the embedding of the joint
//! distribution and that of the product of marginals, so it is non-negative.
//!
//! The null distribution is approximated by permutation: variable 1 stays in
//! place and every other variable gets its own uniform random permutation of
//! the sample order. Gram matrices are computed once and reindexed, so
//! bandwidths come from the original samples only.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{sig6, CellTag};
use crate::rng;
use crate::stats::NeighborMap;

/// `n` samples of one variable, each a point in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    dim: usize,
    data: Vec<f64>,
}

impl Variable {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument(
                "feature dimension must be at least 1".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!(
                "{} values do not split into {dim}-dimensional samples",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("samples must be finite".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    /// Complex samples embedded as `[re, im]` points.
    pub fn from_complex<'a>(values: impl IntoIterator<Item = &'a Complex64>) -> Result<Self> {
        let data = values.into_iter().flat_map(|z| [z.re, z.im]).collect();
        Self::new(2, data)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        self.sample(i)
            .iter()
            .zip(self.sample(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// `d >= 2` variables sharing the same number `n >= 2` of joint samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    variables: Vec<Variable>,
}

impl SampleBlock {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        if variables.len() < 2 {
            return Err(Error::Argument(format!(
                "need at least two variables, got {}",
                variables.len()
            )));
        }
        let n = variables[0].n();
        if variables.iter().any(|v| v.n() != n) {
            return Err(Error::Argument(
                "all variables must have the same sample count".into(),
            ));
        }
        if n < 2 {
            return Err(Error::Argument(format!(
                "need at least two samples, got {n}"
            )));
        }
        Ok(Self { variables })
    }

    pub fn d(&self) -> usize {
        self.variables.len()
    }

    pub fn n(&self) -> usize {
        self.variables[0].n()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    MedianHeuristic,
    Fixed(f64),
}

/// Gaussian kernel `exp(-|x - y|^2 / sigma^2)` with a bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub bandwidth: BandwidthRule,
    /// Bandwidth used when the median heuristic returns zero.
    pub epsilon_floor: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthRule::MedianHeuristic,
            epsilon_floor: 1e-9,
        }
    }
}

impl KernelSpec {
    pub fn bandwidth_for(&self, samples: &Variable) -> Result<f64> {
        match self.bandwidth {
            BandwidthRule::MedianHeuristic => median_bandwidth(samples, self.epsilon_floor),
            BandwidthRule::Fixed(sigma) if sigma > 0.0 && sigma.is_finite() => Ok(sigma),
            BandwidthRule::Fixed(sigma) => Err(Error::Argument(format!(
                "bandwidth must be positive, got {sigma}"
            ))),
        }
    }
}

/// `sqrt(median_{i<j} |x_i - x_j|^2 / 2)`, or `floor` if the median is zero.
pub fn median_bandwidth(samples: &Variable, floor: f64) -> Result<f64> {
    let n = samples.n();
    if n < 2 {
        return Err(Error::Argument(format!(
            "median heuristic needs two samples, got {n}"
        )));
    }
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d2.push(samples.sq_dist(i, j));
        }
    }
    let len = d2.len();
    let mid = len / 2;
    let (_, upper, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = d2[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median == 0.0 {
        return Ok(floor);
    }
    Ok((median / 2.0).sqrt())
}

/// Dense symmetric n x n kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Argument("Gram matrix must be square".into()));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn is_all_ones(&self) -> bool {
        self.data.iter().all(|&v| v == 1.0)
    }
}

pub fn gram(samples: &Variable, sigma: f64) -> Result<Gram> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    let n = samples.n();
    let inv = 1.0 / (sigma * sigma);
    let mut data = vec![1.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let k = (-samples.sq_dist(i, j) * inv).exp();
            data[i * n + j] = k;
            data[j * n + i] = k;
        }
    }
    Ok(Gram { n, data })
}

/// Gram matrices with the permutation-invariant pieces of the statistic
/// precomputed.
struct PreparedGrams {
    grams: Vec<Gram>,
    /// Row sums divided by n.
    row_means: Vec<Vec<f64>>,
    /// prod_l (sum K^l / n^2)
    product_term: f64,
    /// Some variable is constant; the statistic collapses to zero.
    degenerate: bool,
}

impl PreparedGrams {
    fn new(grams: Vec<Gram>) -> Result<Self> {
        if grams.len() < 2 {
            return Err(Error::Argument(format!(
                "need at least two Gram matrices, got {}",
                grams.len()
            )));
        }
        let n = grams[0].n();
        if n == 0 || grams.iter().any(|g| g.n() != n) {
            return Err(Error::Argument(
                "Gram matrices must share a non-zero size".into(),
            ));
        }
        let nf = n as f64;
        let row_means: Vec<Vec<f64>> = grams
            .iter()
            .map(|g| (0..n).map(|i| g.row(i).iter().sum::<f64>() / nf).collect())
            .collect();
        let product_term = row_means
            .iter()
            .map(|r| r.iter().sum::<f64>() / nf)
            .product();
        let degenerate = grams.iter().any(Gram::is_all_ones);
        Ok(Self {
            grams,
            row_means,
            product_term,
            degenerate,
        })
    }

    fn n(&self) -> usize {
        self.grams[0].n()
    }

    /// Statistic after reindexing variable `l >= 1` by `perms[l - 1]`; `None`
    /// means no permutation.
    fn statistic(&self, perms: Option<&[Vec<usize>]>) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let n = self.n();
        let nf = n as f64;
        let index = |l: usize, i: usize| -> usize {
            match perms {
                Some(p) if l > 0 => p[l - 1][i],
                _ => i,
            }
        };

        let mut buf = vec![0.0; n];
        let mut joint = 0.0;
        for i in 0..n {
            buf.copy_from_slice(self.grams[0].row(i));
            for (l, g) in self.grams.iter().enumerate().skip(1) {
                let row = g.row(index(l, i));
                match perms {
                    Some(p) => {
                        let pi = &p[l - 1];
                        for (b, &pj) in buf.iter_mut().zip(pi) {
                            *b *= row[pj];
                        }
                    }
                    None => {
                        for (b, &k) in buf.iter_mut().zip(row) {
                            *b *= k;
                        }
                    }
                }
            }
            joint += buf.iter().sum::<f64>();
        }
        let joint = joint / (nf * nf);

        let cross: f64 = (0..n)
            .map(|i| {
                self.row_means
                    .iter()
                    .enumerate()
                    .map(|(l, r)| r[index(l, i)])
                    .product::<f64>()
            })
            .sum::<f64>()
            * 2.0
            / nf;

        joint + self.product_term - cross
    }
}

/// The dHSIC V-statistic of a set of equally sized Gram matrices.
pub fn dhsic_statistic(grams: &[Gram]) -> Result<f64> {
    Ok(PreparedGrams::new(grams.to_vec())?.statistic(None))
}

/// 1-based index into the sorted resamples:
/// `ceil((B + 1)(1 - alpha)) + ties`.
pub fn quantile_index(resamples: usize, alpha: f64, ties: usize) -> usize {
    let raw = (resamples as f64 + 1.0) * (1.0 - alpha);
    // (B+1)(1-alpha) is often an integer in exact arithmetic; don't let
    // representation error push it to the next one (150 * 0.82).
    let nearest = raw.round();
    let base = if (raw - nearest).abs() <= 1e-9 * raw.abs().max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    base as usize + ties
}

/// Permutation null distribution of one test.
#[derive(Debug, Clone, PartialEq)]
pub struct NullDistribution {
    pub statistic: f64,
    /// `+inf` when the quantile index exceeds the resample count.
    pub critical_value: f64,
    pub quantile_index: usize,
    /// Sorted ascending.
    pub resamples: Vec<f64>,
}

fn check_test_args(alpha: f64, resamples: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if resamples < 1 {
        return Err(Error::Argument("need at least one permutation".into()));
    }
    Ok(())
}

fn prepare(block: &SampleBlock, spec: &KernelSpec) -> Result<PreparedGrams> {
    let grams = block
        .variables()
        .iter()
        .map(|v| gram(v, spec.bandwidth_for(v)?))
        .collect::<Result<Vec<_>>>()?;
    PreparedGrams::new(grams)
}

fn null_distribution(
    prepared: &PreparedGrams,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> NullDistribution {
    let n = prepared.n();
    let d = prepared.grams.len();
    let statistic = prepared.statistic(None);
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, &[rng::tag("permutation"), b as u64]);
            let perms: Vec<Vec<usize>> = (1..d)
                .map(|_| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect();
            prepared.statistic(Some(&perms))
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let ties = values.iter().filter(|&&v| v == statistic).count();
    let q = quantile_index(resamples, alpha, ties);
    let critical_value = if q <= resamples {
        values[q - 1]
    } else {
        f64::INFINITY
    };
    NullDistribution {
        statistic,
        critical_value,
        quantile_index: q,
        resamples: values,
    }
}

/// Critical value of the permutation test at level `alpha` from `resamples`
/// permutations.
pub fn permutation_critical_value(
    block: &SampleBlock,
    spec: &KernelSpec,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<NullDistribution> {
    check_test_args(alpha, resamples)?;
    let prepared = prepare(block, spec)?;
    Ok(null_distribution(&prepared, alpha, resamples, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhsicTest {
    pub statistic: f64,
    pub critical_value: f64,
    pub alpha: f64,
    pub permutations: usize,
    pub reject: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_values: Option<Vec<f64>>,
}

impl DhsicTest {
    fn from_null(null: NullDistribution, alpha: f64, keep_resamples: bool) -> Self {
        let reject = null.critical_value.is_finite() && null.statistic >= null.critical_value;
        Self {
            statistic: null.statistic,
            critical_value: null.critical_value,
            alpha,
            permutations: null.resamples.len(),
            reject,
            resample_values: keep_resamples.then_some(null.resamples),
        }
    }
}

/// Tests the null hypothesis that the variables of `block` are mutually
/// independent.
pub fn test_independence(
    block: &SampleBlock,
    spec: &KernelSpec,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<DhsicTest> {
    let null = permutation_critical_value(block, spec, alpha, resamples, seed)?;
    Ok(DhsicTest::from_null(null, alpha, true))
}

/// Which rows enter a neighborhood test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodVariables {
    /// The location and its k neighbors (d = k + 1).
    #[default]
    CenterAndNeighbors,
    /// The k neighbors only (d = k).
    NeighborsOnly,
}

fn row_variable(m: &DMatrix<Complex64>, r: usize) -> Result<Variable> {
    Variable::from_complex(m.row(r).iter())
}

/// One test per location; each variable is a row of `residual` whose
/// subcarriers are the joint samples.
pub fn neighborhood_tests(
    residual: &DMatrix<Complex64>,
    nmap: &NeighborMap,
    spec: &KernelSpec,
    alpha: f64,
    resamples: usize,
    seed: u64,
    variables: NeighborhoodVariables,
) -> Result<Vec<DhsicTest>> {
    check_test_args(alpha, resamples)?;
    if residual.nrows() != nmap.len() {
        return Err(Error::Argument(format!(
            "residual has {} rows but the neighbor map covers {} locations",
            residual.nrows(),
            nmap.len()
        )));
    }
    let d = match variables {
        NeighborhoodVariables::CenterAndNeighbors => nmap.k + 1,
        NeighborhoodVariables::NeighborsOnly => nmap.k,
    };
    if d < 2 {
        return Err(Error::Argument(format!(
            "neighborhood test needs d >= 2 variables, got {d}"
        )));
    }
    let rows: Vec<Variable> = (0..residual.nrows())
        .map(|r| row_variable(residual, r))
        .collect::<Result<_>>()?;
    nmap.indices
        .par_iter()
        .enumerate()
        .map(|(center, neighbors)| {
            let members = match variables {
                NeighborhoodVariables::CenterAndNeighbors => std::iter::once(center)
                    .chain(neighbors.iter().copied())
                    .collect::<Vec<_>>(),
                NeighborhoodVariables::NeighborsOnly => neighbors.clone(),
            };
            let block = SampleBlock::new(members.iter().map(|&r| rows[r].clone()).collect())?;
            let prepared = prepare(&block, spec)?;
            let cell_seed = rng::derive_seed(seed, &[rng::tag("location"), center as u64]);
            let null = null_distribution(&prepared, alpha, resamples, cell_seed);
            Ok(DhsicTest::from_null(null, alpha, false))
        })
        .collect()
}

/// Fraction of locations whose neighborhood test rejects independence.
pub fn neighborhood_rejection_rate(
    residual: &DMatrix<Complex64>,
    nmap: &NeighborMap,
    spec: &KernelSpec,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    let tests = neighborhood_tests(
        residual,
        nmap,
        spec,
        alpha,
        resamples,
        seed,
        NeighborhoodVariables::CenterAndNeighbors,
    )?;
    Ok(rejection_fraction(&tests))
}

pub fn rejection_fraction(tests: &[DhsicTest]) -> f64 {
    if tests.is_empty() {
        return 0.0;
    }
    tests.iter().filter(|t| t.reject).count() as f64 / tests.len() as f64
}

/// Joint independence of the subcarriers: one variable per column, the
/// locations being the joint samples.
pub fn subcarrier_test(
    residual: &DMatrix<Complex64>,
    spec: &KernelSpec,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<DhsicTest> {
    let (n, m) = residual.shape();
    if n < 2 || m < 2 {
        return Err(Error::Argument(format!(
            "subcarrier test needs at least a 2 x 2 matrix, got {n} x {m}"
        )));
    }
    let variables = residual
        .column_iter()
        .map(|c| Variable::from_complex(c.iter()))
        .collect::<Result<Vec<_>>>()?;
    test_independence(&SampleBlock::new(variables)?, spec, alpha, resamples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Neighborhood,
    Subcarrier,
}

impl std::fmt::Display for TestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestKind::Neighborhood => "neighborhood",
            TestKind::Subcarrier => "subcarrier",
        })
    }
}

/// One line of a test-result CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRow {
    pub tag: CellTag,
    pub kind: TestKind,
    pub location: Option<usize>,
    pub test: DhsicTest,
}

pub const TEST_CSV_HEADER: [&str; 10] = [
    "snr_db",
    "scs_hz",
    "d_hat",
    "test_kind",
    "location_index",
    "statistic",
    "critical_value",
    "alpha",
    "B",
    "reject",
];

pub fn write_test_rows<W: Write>(out: W, rows: &[TestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TEST_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            sig6(r.tag.snr_db),
            sig6(r.tag.scs_hz),
            r.tag.stage.to_string(),
            r.kind.to_string(),
            r.location.map_or("-1".to_string(), |l| l.to_string()),
            sig6(r.test.statistic),
            sig6(r.test.critical_value),
            sig6(r.test.alpha),
            r.test.permutations.to_string(),
            r.test.reject.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
