//! Post-training analysis of the learned communication protocol.
//!
//! The protocol lives in the encoder: label i's message is the encoding of
//! its one-hot observation. With the mean aggregator, what an agent receives
//! is the midpoint of the other agents' messages, so decodability hinges on
//! the pairwise midpoints staying apart. The curve fit checks the shape the
//! messages settle into: one analyzed coordinate against a * 2^tau + b, the
//! other against c * ln(tau + 1) + d, where tau ranks the labels along the
//! curve.

use crate::error::{Error, Result};
use crate::model::{encode_obs_t, Parameters};
use crate::tape::Tape;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// Message vector per label: row i is the encoding of one_hot(i).
#[derive(Clone, Debug, PartialEq)]
pub struct CommPolicyTable {
    messages: Matrix,
}

impl CommPolicyTable {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(CommPolicyTable {
            messages: Matrix::from_rows(rows)?,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.messages.rows()
    }

    pub fn message_size(&self) -> usize {
        self.messages.cols()
    }

    pub fn row(&self, label: usize) -> &[f64] {
        self.messages.row(label)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_labels()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Per-column variance across labels.
    pub fn column_variances(&self) -> Vec<f64> {
        let (l, m) = self.messages.shape();
        (0..m)
            .map(|c| {
                let mean = (0..l).map(|r| self.messages.get(r, c)).sum::<f64>() / l as f64;
                (0..l).map(|r| (self.messages.get(r, c) - mean).powi(2)).sum::<f64>() / l as f64
            })
            .collect()
    }
}

/// Encodes every label's one-hot observation in one batched pass.
pub fn extract_comm_policy(params: &Parameters, n_labels: usize) -> Result<CommPolicyTable> {
    let (l, _, _) = params.dims();
    if n_labels != l {
        return Err(Error::shape(
            "extract_comm_policy",
            format!("{n_labels} labels requested, parameters encode {l}"),
        ));
    }
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let eye = tape.leaf(Matrix::identity(n_labels));
    let h = encode_obs_t(&mut tape, eye, &p)?;
    Ok(CommPolicyTable {
        messages: tape.value(h).clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanPoint {
    /// Unordered label pair, stored with pair.0 <= pair.1.
    pub pair: (usize, usize),
    pub point: Vec<f64>,
}

/// Midpoints of every unordered message pair, self-pairs included: with the
/// mean aggregator and three agents these are exactly the incoming messages
/// an agent can receive.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanPointSet {
    pub points: Vec<MeanPoint>,
}

pub fn pairwise_means(table: &CommPolicyTable) -> MeanPointSet {
    let l = table.n_labels();
    let mut points = Vec::with_capacity(l * (l + 1) / 2);
    for i in 0..l {
        for j in i..l {
            let point = table
                .row(i)
                .iter()
                .zip(table.row(j))
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            points.push(MeanPoint { pair: (i, j), point });
        }
    }
    MeanPointSet { points }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimum distance between distinct mean points and the two pair
/// identities achieving it. The larger this is, the more noise the
/// receiving agents can tolerate.
pub fn separability(set: &MeanPointSet) -> Result<(f64, ((usize, usize), (usize, usize)))> {
    if set.points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "separability needs at least 2 mean points, got {}",
            set.points.len()
        )));
    }
    let mut best = f64::INFINITY;
    let mut arg = (set.points[0].pair, set.points[1].pair);
    for i in 0..set.points.len() {
        for j in i + 1..set.points.len() {
            let d = euclidean(&set.points[i].point, &set.points[j].point);
            if d < best {
                best = d;
                arg = (set.points[i].pair, set.points[j].pair);
            }
        }
    }
    Ok((best, arg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2_x: f64,
    pub r2_y: f64,
    /// tau_order[t] is the label placed at tau = t.
    pub tau_order: Vec<usize>,
}

/// 1 - SS_res / SS_tot. A constant target is 1 on exact fit and the
/// -infinity sentinel otherwise, keeping the range (-inf, 1].
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::shape(
            "r_squared",
            format!("{} actual vs {} predicted", actual.len(), predicted.len()),
        ));
    }
    if actual.len() < 2 {
        return Err(Error::InsufficientData(
            "r_squared needs at least 2 samples".into(),
        ));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Least squares for target = slope * basis + intercept. An exactly
/// constant target short-circuits to (0, constant) so the caller's R²
/// convention sees zero residuals instead of normal-equation dust.
fn ols_2(basis: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let first = target[0];
    if target.iter().all(|&t| t == first) {
        return Ok((0.0, first));
    }
    let n = basis.len() as f64;
    let g_mean = basis.iter().sum::<f64>() / n;
    let t_mean = target.iter().sum::<f64>() / n;
    let mut sgg = 0.0;
    let mut sgt = 0.0;
    for (&g, &t) in basis.iter().zip(target) {
        sgg += (g - g_mean) * (g - g_mean);
        sgt += (g - g_mean) * (t - t_mean);
    }
    if sgg == 0.0 {
        return Err(Error::InsufficientData("degenerate regression basis".into()));
    }
    let slope = sgt / sgg;
    Ok((slope, t_mean - slope * g_mean))
}

fn fit_with_order(xs: &[f64], ys: &[f64], order: Vec<usize>) -> Result<RegressionResult> {
    let l = order.len();
    let basis_x: Vec<f64> = (0..l).map(|t| 2f64.powi(t as i32)).collect();
    let basis_y: Vec<f64> = (0..l).map(|t| ((t + 1) as f64).ln()).collect();
    let tx: Vec<f64> = order.iter().map(|&lab| xs[lab]).collect();
    let ty: Vec<f64> = order.iter().map(|&lab| ys[lab]).collect();
    let (a, b) = ols_2(&basis_x, &tx)?;
    let (c, d) = ols_2(&basis_y, &ty)?;
    let pred_x: Vec<f64> = basis_x.iter().map(|g| a * g + b).collect();
    let pred_y: Vec<f64> = basis_y.iter().map(|g| c * g + d).collect();
    Ok(RegressionResult {
        a,
        b,
        c,
        d,
        r2_x: r_squared(&tx, &pred_x)?,
        r2_y: r_squared(&ty, &pred_y)?,
        tau_order: order,
    })
}

/// Fits x = a * 2^tau + b and y = c * ln(tau + 1) + d over the two analyzed
/// coordinates, assigning tau by rank along the logarithmic coordinate.
/// Ranking ascending assumes the curve rises with tau; since a protocol may
/// just as well settle on the mirrored (falling) curve, both orientations
/// are fitted and the one with the higher combined R² wins (ascending on
/// ties).
pub fn fit_parametric(table: &CommPolicyTable, dims: (usize, usize)) -> Result<RegressionResult> {
    let l = table.n_labels();
    let m = table.message_size();
    if l < 3 {
        return Err(Error::InsufficientData(format!(
            "parametric fit needs at least 3 labels, got {l}"
        )));
    }
    if dims.0 >= m || dims.1 >= m || dims.0 == dims.1 {
        return Err(Error::InvalidConfig(format!(
            "analyzed coordinates {dims:?} invalid for message size {m}"
        )));
    }
    let xs: Vec<f64> = (0..l).map(|i| table.row(i)[dims.0]).collect();
    let ys: Vec<f64> = (0..l).map(|i| table.row(i)[dims.1]).collect();

    let mut ascending: Vec<usize> = (0..l).collect();
    ascending.sort_by(|&i, &j| ys[i].total_cmp(&ys[j]).then(i.cmp(&j)));
    let descending: Vec<usize> = ascending.iter().rev().copied().collect();

    let fit_asc = fit_with_order(&xs, &ys, ascending)?;
    let fit_desc = fit_with_order(&xs, &ys, descending)?;
    if fit_desc.r2_x + fit_desc.r2_y > fit_asc.r2_x + fit_asc.r2_y {
        Ok(fit_desc)
    } else {
        Ok(fit_asc)
    }
}

/// Default analyzed coordinates: the two highest-variance columns, widest
/// first. Matches the observation that trained protocols concentrate
/// information in few coordinates.
pub fn default_dims(table: &CommPolicyTable) -> Result<(usize, usize)> {
    if table.message_size() < 2 {
        return Err(Error::InsufficientData(
            "analysis needs at least 2 message coordinates".into(),
        ));
    }
    let variances = table.column_variances();
    let mut cols: Vec<usize> = (0..variances.len()).collect();
    cols.sort_by(|&i, &j| variances[j].total_cmp(&variances[i]).then(i.cmp(&j)));
    Ok((cols[0], cols[1]))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2_x: f64,
    pub r2_y: f64,
    pub tau_order: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub policy_table: Vec<Vec<f64>>,
    pub mean_points: Vec<MeanPoint>,
    pub min_distance: f64,
    pub min_distance_pair: ((usize, usize), (usize, usize)),
    pub dims: (usize, usize),
    pub fit: FitReport,
}

/// Runs the whole pipeline: table, midpoints, separability, curve fit.
pub fn analyze(
    params: &Parameters,
    n_labels: usize,
    dims: Option<(usize, usize)>,
) -> Result<AnalysisReport> {
    let table = extract_comm_policy(params, n_labels)?;
    let points = pairwise_means(&table);
    let (min_distance, min_distance_pair) = separability(&points)?;
    let dims = match dims {
        Some(d) => d,
        None => default_dims(&table)?,
    };
    let fit = fit_parametric(&table, dims)?;
    Ok(AnalysisReport {
        policy_table: table.to_rows(),
        mean_points: points.points,
        min_distance,
        min_distance_pair,
        dims,
        fit: FitReport {
            a: fit.a,
            b: fit.b,
            c: fit.c,
            d: fit.d,
            r2_x: fit.r2_x,
            r2_y: fit.r2_y,
            tau_order: fit.tau_order,
        },
    })
}
