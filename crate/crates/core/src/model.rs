//! Logistic-regression fusion of deep-model probabilities and handcrafted
//! features.
//!
//! The canonical component order is
//! `[p_hcc, p_aphe, p_ec, p_npw, f_aphe, f_ec, f_npw, size_mm]`; the DLF and
//! HF ablations keep a subset of it, always including the size.
//!
//! Each component is z-scored with training statistics, then
//!
//! ```text
//! minimise (1/n) Σ log(1 + exp(-ỹ_i (w·x̃_i + α))) + λ‖w‖²,   ỹ ∈ {-1, +1}
//! ```
//!
//! is solved by damped Newton iterations. The intercept is not penalised.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, stratified_assignment};
use crate::radiomics::HandcraftedFeatures;

/// Gradient ∞-norm at which the optimiser stops.
pub const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 200;
/// Mean inner-fold AUCs closer than this are treated as tied.
const AUC_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PHcc,
    PAphe,
    PEc,
    PNpw,
    FAphe,
    FEc,
    FNpw,
    SizeMm,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::PHcc,
        Component::PAphe,
        Component::PEc,
        Component::PNpw,
        Component::FAphe,
        Component::FEc,
        Component::FNpw,
        Component::SizeMm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::PHcc => "p_hcc",
            Component::PAphe => "p_aphe",
            Component::PEc => "p_ec",
            Component::PNpw => "p_npw",
            Component::FAphe => "f_aphe",
            Component::FEc => "f_ec",
            Component::FNpw => "f_npw",
            Component::SizeMm => "size_mm",
        }
    }

    pub fn is_deep(&self) -> bool {
        matches!(
            self,
            Component::PHcc | Component::PAphe | Component::PEc | Component::PNpw
        )
    }
}

/// Which feature families enter the fusion. Size is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSubset {
    #[serde(rename = "dlf")]
    Dlf,
    #[serde(rename = "hf")]
    Hf,
    #[serde(rename = "dlf+hf")]
    DlfPlusHf,
}

impl FeatureSubset {
    pub const ALL: [FeatureSubset; 3] = [FeatureSubset::Dlf, FeatureSubset::Hf, FeatureSubset::DlfPlusHf];

    pub fn components(&self) -> &'static [Component] {
        use Component::*;
        match self {
            FeatureSubset::Dlf => &[PHcc, PAphe, PEc, PNpw, SizeMm],
            FeatureSubset::Hf => &[FAphe, FEc, FNpw, SizeMm],
            FeatureSubset::DlfPlusHf => &Component::ALL,
        }
    }

    pub fn needs_probs(&self) -> bool {
        !matches!(self, FeatureSubset::Hf)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSubset::Dlf => "dlf",
            FeatureSubset::Hf => "hf",
            FeatureSubset::DlfPlusHf => "dlf+hf",
        }
    }

    /// Column label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            FeatureSubset::Dlf => "DLF",
            FeatureSubset::Hf => "HF",
            FeatureSubset::DlfPlusHf => "DLF+HF",
        }
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dlf" => Ok(FeatureSubset::Dlf),
            "hf" => Ok(FeatureSubset::Hf),
            "dlf+hf" | "dlf_plus_hf" | "all" => Ok(FeatureSubset::DlfPlusHf),
            other => Err(Error::InvalidArgument(format!("unknown feature subset {other:?}"))),
        }
    }
}

/// Deep-model probabilities for one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeepProbs {
    pub p_hcc: f64,
    pub p_aphe: f64,
    pub p_ec: f64,
    pub p_npw: f64,
}

impl DeepProbs {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hcc", self.p_hcc),
            ("p_aphe", self.p_aphe),
            ("p_ec", self.p_ec),
            ("p_npw", self.p_npw),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {p} is not a probability in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ProbRow {
    lesion_id: String,
    p_hcc: f64,
    p_aphe: f64,
    p_ec: f64,
    p_npw: f64,
}

pub const PROBS_HEADER: [&str; 5] = ["lesion_id", "p_hcc", "p_aphe", "p_ec", "p_npw"];

/// Strict loader for `lesion_id,p_hcc,p_aphe,p_ec,p_npw` files.
pub fn load_deep_probs(path: impl AsRef<Path>) -> Result<BTreeMap<String, DeepProbs>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    for col in PROBS_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::csv(path, format!("missing column {col}")));
        }
    }
    let mut out = BTreeMap::new();
    for (i, row) in reader.deserialize::<ProbRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let probs = DeepProbs {
            p_hcc: row.p_hcc,
            p_aphe: row.p_aphe,
            p_ec: row.p_ec,
            p_npw: row.p_npw,
        };
        probs
            .validate()
            .map_err(|e| Error::csv(path, format!("row {} ({}): {e}", i + 1, row.lesion_id)))?;
        if out.insert(row.lesion_id.clone(), probs).is_some() {
            return Err(Error::csv(path, format!("duplicate lesion_id {}", row.lesion_id)));
        }
    }
    Ok(out)
}

pub fn write_deep_probs(probs: &BTreeMap<String, DeepProbs>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = PROBS_HEADER.join(",");
    out.push('\n');
    for (id, p) in probs {
        out.push_str(&format!("{id},{},{},{},{}\n", p.p_hcc, p.p_aphe, p.p_ec, p.p_npw));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Components of one case, restricted to a [`FeatureSubset`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub subset: FeatureSubset,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn components(&self) -> &'static [Component] {
        self.subset.components()
    }
}

pub fn assemble(
    features: &HandcraftedFeatures,
    probs: Option<&DeepProbs>,
    subset: FeatureSubset,
) -> Result<FeatureVector> {
    let probs = match (subset.needs_probs(), probs) {
        (true, None) => {
            return Err(Error::Missing(format!(
                "lesion {}: deep probabilities required for subset {subset}",
                features.lesion_id
            )))
        }
        (_, p) => p,
    };
    let values = subset
        .components()
        .iter()
        .map(|c| match c {
            // needs_probs() guarantees `probs` for the deep components
            Component::PHcc => probs.map_or(f64::NAN, |p| p.p_hcc),
            Component::PAphe => probs.map_or(f64::NAN, |p| p.p_aphe),
            Component::PEc => probs.map_or(f64::NAN, |p| p.p_ec),
            Component::PNpw => probs.map_or(f64::NAN, |p| p.p_npw),
            Component::FAphe => features.f_aphe,
            Component::FEc => features.f_ec,
            Component::FNpw => features.f_npw,
            Component::SizeMm => features.size_mm,
        })
        .collect();
    Ok(FeatureVector { subset, values })
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn signed(label: u8) -> f64 {
    if label >= 1 {
        1.0
    } else {
        -1.0
    }
}

/// Regularised objective at `(weights, intercept)` over (already standardised) rows.
pub fn loss(rows: &[Vec<f64>], labels: &[u8], lambda: f64, weights: &[f64], intercept: f64) -> f64 {
    let n = rows.len() as f64;
    let data: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| softplus(-signed(y) * (dot(weights, x) + intercept)))
        .sum();
    data / n + lambda * dot(weights, weights)
}

/// Objective and its gradient; the last gradient entry is ∂/∂intercept.
pub fn loss_and_gradient(
    rows: &[Vec<f64>],
    labels: &[u8],
    lambda: f64,
    weights: &[f64],
    intercept: f64,
) -> (f64, Vec<f64>) {
    let n = rows.len() as f64;
    let d = weights.len();
    let mut grad = vec![0.0; d + 1];
    let mut data = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let ys = signed(y);
        let m = ys * (dot(weights, x) + intercept);
        data += softplus(-m);
        // d/dz softplus(-y z) = -y σ(-m)
        let g = -ys * sigmoid(-m);
        for j in 0..d {
            grad[j] += g * x[j];
        }
        grad[d] += g;
    }
    for j in 0..d {
        grad[j] = grad[j] / n + 2.0 * lambda * weights[j];
    }
    grad[d] /= n;
    (data / n + lambda * dot(weights, weights), grad)
}

fn hessian(rows: &[Vec<f64>], lambda: f64, weights: &[f64], intercept: f64) -> DMatrix<f64> {
    let n = rows.len() as f64;
    let d = weights.len();
    let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
    for x in rows {
        let p = sigmoid(dot(weights, x) + intercept);
        let s = p * (1.0 - p);
        for a in 0..=d {
            let xa = if a < d { x[a] } else { 1.0 };
            for b in a..=d {
                let xb = if b < d { x[b] } else { 1.0 };
                h[(a, b)] += s * xa * xb;
            }
        }
    }
    for a in 0..=d {
        for b in a..=d {
            h[(a, b)] /= n;
            h[(b, a)] = h[(a, b)];
        }
    }
    for j in 0..d {
        h[(j, j)] += 2.0 * lambda;
    }
    h
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `H Δ = g`, adding diagonal damping until `H` factors.
fn newton_direction(h: DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(g);
    let scale = h.diagonal().amax().max(1e-300);
    let mut damping = 0.0;
    for _ in 0..30 {
        let mut hd = h.clone();
        for i in 0..hd.nrows() {
            hd[(i, i)] += damping;
        }
        if let Some(chol) = hd.cholesky() {
            let step = chol.solve(&rhs);
            if step.iter().all(|v| v.is_finite()) {
                return Some(step.iter().copied().collect());
            }
        }
        damping = if damping == 0.0 { scale * 1e-12 } else { damping * 10.0 };
    }
    None
}

/// Optimum of [`loss`] on standardised rows: `(weights, intercept, iterations)`.
pub fn minimize(rows: &[Vec<f64>], labels: &[u8], lambda: f64) -> Result<(Vec<f64>, f64, usize)> {
    let d = rows.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut f, mut g) = loss_and_gradient(rows, labels, lambda, &w, b);
    for it in 0..MAX_NEWTON_ITERS {
        let gnorm = inf_norm(&g);
        if gnorm <= GRAD_TOL {
            return Ok((w, b, it));
        }
        let step = newton_direction(hessian(rows, lambda, &w, b), &g).ok_or(Error::NotConverged {
            iterations: it,
            grad_norm: gnorm,
        })?;
        let slope = dot(&g, &step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wt: Vec<f64> = w.iter().zip(&step).map(|(wi, si)| wi - t * si).collect();
            let bt = b - t * step[d];
            let (ft, gt) = loss_and_gradient(rows, labels, lambda, &wt, bt);
            // Near the optimum the loss change drops below rounding; a full
            // Newton step that shrinks the gradient is then accepted as is.
            let armijo = ft <= f - 1e-4 * t * slope;
            let tiny = t == 1.0 && ft <= f + 1e-15 * f.abs().max(1.0) && inf_norm(&gt) < gnorm;
            if ft.is_finite() && (armijo || tiny) {
                w = wt;
                b = bt;
                f = ft;
                g = gt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return if gnorm <= 1e3 * GRAD_TOL {
                Ok((w, b, it))
            } else {
                Err(Error::NotConverged {
                    iterations: it,
                    grad_norm: gnorm,
                })
            };
        }
    }
    let gnorm = inf_norm(&g);
    if gnorm <= GRAD_TOL {
        Ok((w, b, MAX_NEWTON_ITERS))
    } else {
        Err(Error::NotConverged {
            iterations: MAX_NEWTON_ITERS,
            grad_norm: gnorm,
        })
    }
}

/// Column-wise z-score statistics. Constant columns get a std of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut means = vec![0.0; d];
        for x in rows {
            for j in 0..d {
                means[j] += x[j];
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; d];
        for x in rows {
            for j in 0..d {
                stds[j] += (x[j] - means[j]).powi(2);
            }
        }
        for (s, m) in stds.iter_mut().zip(&means) {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12 * m.abs().max(1.0)) {
                *s = 1.0;
            }
        }
        Standardizer { means, stds }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn check_training_data(rows: &[Vec<f64>], labels: &[u8], lambda: f64) -> Result<()> {
    if rows.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("rows have different lengths".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Standardised logistic regression on plain feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub standardizer: Standardizer,
    pub iterations: usize,
}

impl LogisticRegression {
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], lambda: f64) -> Result<Self> {
        check_training_data(rows, labels, lambda)?;
        let standardizer = Standardizer::fit(rows);
        let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
        let (weights, intercept, iterations) = minimize(&z, labels, lambda)?;
        Ok(LogisticRegression {
            weights,
            intercept,
            lambda,
            standardizer,
            iterations,
        })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, &self.standardizer.apply(x)) + self.intercept
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} features, got {}",
                self.weights.len(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction input".into()));
        }
        Ok(sigmoid(self.decision(x)))
    }

    /// Objective value at the fitted optimum, on the standardised training rows.
    pub fn training_loss(&self, rows: &[Vec<f64>], labels: &[u8]) -> f64 {
        let z: Vec<Vec<f64>> = rows.iter().map(|r| self.standardizer.apply(r)).collect();
        loss(&z, labels, self.lambda, &self.weights, self.intercept)
    }
}

/// Fitted fusion model over one [`FeatureSubset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub subset: FeatureSubset,
    pub component_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    #[serde(rename = "means")]
    pub feature_means: Vec<f64>,
    #[serde(rename = "stds")]
    pub feature_stds: Vec<f64>,
}

impl LogRegModel {
    fn from_regression(subset: FeatureSubset, lr: LogisticRegression) -> Self {
        LogRegModel {
            subset,
            component_names: subset.components().iter().map(|c| c.name().to_string()).collect(),
            weights: lr.weights,
            intercept: lr.intercept,
            lambda: lr.lambda,
            feature_means: lr.standardizer.means,
            feature_stds: lr.standardizer.stds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LogRegModel = serde_json::from_str(text)?;
        let d = m.subset.components().len();
        if m.weights.len() != d || m.feature_means.len() != d || m.feature_stds.len() != d {
            return Err(Error::InvalidArgument(format!(
                "model for subset {} needs {d} weights/means/stds",
                m.subset
            )));
        }
        if m.feature_stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("model stds must be > 0".into()));
        }
        Ok(m)
    }
}

fn vectors_to_rows(vectors: &[FeatureVector]) -> Result<(FeatureSubset, Vec<Vec<f64>>)> {
    let subset = vectors
        .first()
        .map(|v| v.subset)
        .ok_or_else(|| Error::InvalidArgument("no training vectors".into()))?;
    if vectors.iter().any(|v| v.subset != subset) {
        return Err(Error::InvalidArgument(
            "training vectors mix feature subsets".into(),
        ));
    }
    Ok((subset, vectors.iter().map(|v| v.values.clone()).collect()))
}

pub fn fit(vectors: &[FeatureVector], labels: &[u8], lambda: f64) -> Result<LogRegModel> {
    let (subset, rows) = vectors_to_rows(vectors)?;
    let lr = LogisticRegression::fit(&rows, labels, lambda)?;
    Ok(LogRegModel::from_regression(subset, lr))
}

pub fn predict(model: &LogRegModel, x: &FeatureVector) -> Result<f64> {
    if x.subset != model.subset {
        return Err(Error::InvalidArgument(format!(
            "vector subset {} does not match model subset {}",
            x.subset, model.subset
        )));
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction input".into()));
    }
    let z: f64 = x
        .values
        .iter()
        .zip(&model.weights)
        .zip(model.feature_means.iter().zip(&model.feature_stds))
        .map(|((v, w), (m, s))| w * (v - m) / s)
        .sum();
    Ok(sigmoid(z + model.intercept))
}

/// `|w|` per component in canonical order, on the standardised scale.
pub fn coefficient_magnitudes(model: &LogRegModel) -> Vec<(String, f64)> {
    model
        .component_names
        .iter()
        .zip(&model.weights)
        .map(|(n, w)| (n.clone(), w.abs()))
        .collect()
}

/// 13 log-spaced values from 1e-3 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Mean inner-fold validation AUC per grid value, in grid order.
    pub mean_aucs: Vec<f64>,
    /// More than one grid value reached the best mean AUC.
    pub tied: bool,
}

/// Picks the grid value with the best mean validation AUC over stratified
/// inner folds; ties go to the larger λ.
pub fn tune_lambda(
    rows: &[Vec<f64>],
    labels: &[u8],
    grid: &[f64],
    inner_folds: usize,
    seed: u64,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("invalid lambda {bad}")));
    }
    if grid.len() == 1 {
        return Ok(LambdaSelection {
            lambda: grid[0],
            mean_aucs: vec![f64::NAN],
            tied: false,
        });
    }
    check_training_data(rows, labels, grid[0])?;
    let folds = stratified_assignment(labels, inner_folds, seed)?;

    let mut mean_aucs = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut total = 0.0;
        for k in 0..inner_folds {
            let (mut tr_x, mut tr_y, mut va_x, mut va_y) = (vec![], vec![], vec![], vec![]);
            for (i, &f) in folds.iter().enumerate() {
                if f == k {
                    va_x.push(rows[i].clone());
                    va_y.push(labels[i]);
                } else {
                    tr_x.push(rows[i].clone());
                    tr_y.push(labels[i]);
                }
            }
            let lr = LogisticRegression::fit(&tr_x, &tr_y, lambda)?;
            let scores: Vec<f64> = va_x.iter().map(|x| lr.decision(x)).collect();
            total += auc(&scores, &va_y)?;
        }
        mean_aucs.push(total / inner_folds as f64);
    }

    let best = mean_aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..grid.len())
        .filter(|&i| best - mean_aucs[i] <= AUC_TIE_EPS)
        .collect();
    let pick = winners
        .iter()
        .copied()
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .unwrap_or(0);
    Ok(LambdaSelection {
        lambda: grid[pick],
        mean_aucs,
        tied: winners.len() > 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hf(id: &str) -> HandcraftedFeatures {
        HandcraftedFeatures {
            lesion_id: id.into(),
            f_aphe: 1.0,
            f_ec: 2.0,
            f_npw: 3.0,
            size_mm: 4.0,
        }
    }

    const PROBS: DeepProbs = DeepProbs {
        p_hcc: 0.9,
        p_aphe: 0.8,
        p_ec: 0.2,
        p_npw: 0.7,
    };

    #[test]
    fn assemble_orders_and_masks() {
        let v = assemble(&hf("a"), Some(&PROBS), FeatureSubset::DlfPlusHf).unwrap();
        assert_eq!(v.values, vec![0.9, 0.8, 0.2, 0.7, 1.0, 2.0, 3.0, 4.0]);
        let v = assemble(&hf("a"), None, FeatureSubset::Hf).unwrap();
        assert_eq!(v.values, vec![1.0, 2.0, 3.0, 4.0]);
        let v = assemble(&hf("a"), Some(&PROBS), FeatureSubset::Dlf).unwrap();
        assert_eq!(v.values, vec![0.9, 0.8, 0.2, 0.7, 4.0]);
        assert!(matches!(
            assemble(&hf("a"), None, FeatureSubset::Dlf),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn probs_csv_strictness() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, "lesion_id,p_hcc,p_aphe,p_ec,p_npw\nL001,0.9,0.8,0.2,0.7\n").unwrap();
        assert_eq!(load_deep_probs(&p).unwrap()["L001"], PROBS);

        fs::write(&p, "lesion_id,p_hcc,p_aphe,p_ec,p_npw\nL001,1.2,0.8,0.2,0.7\n").unwrap();
        assert!(load_deep_probs(&p).is_err());
        fs::write(&p, "lesion_id,p_hcc,p_aphe,p_ec,p_npw\nL001,0.9,0.8,0.2,0.7\nL001,0.1,0.8,0.2,0.7\n").unwrap();
        assert!(load_deep_probs(&p).unwrap_err().to_string().contains("duplicate"));
        fs::write(&p, "lesion_id,p_hcc,p_aphe,p_ec\nL001,0.9,0.8,0.2\n").unwrap();
        assert!(load_deep_probs(&p).unwrap_err().to_string().contains("missing column p_npw"));
        fs::write(&p, "lesion_id,p_hcc,p_aphe,p_ec,p_npw\nL001,NaN,0.8,0.2,0.7\n").unwrap();
        assert!(load_deep_probs(&p).is_err());
    }

    #[test]
    fn probs_write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), PROBS);
        m.insert("a".to_string(), DeepProbs { p_hcc: 1.0 / 3.0, p_aphe: 0.0, p_ec: 1.0, p_npw: 0.5 });
        write_deep_probs(&m, dir.path().join("x.csv")).unwrap();
        assert_eq!(load_deep_probs(dir.path().join("x.csv")).unwrap(), m);
    }

    #[test]
    fn balanced_constant_data_predicts_half() {
        let rows = vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        let lr = LogisticRegression::fit(&rows, &[0, 1, 0, 1], 1.0).unwrap();
        assert_eq!(lr.weights, vec![0.0]);
        assert!(lr.intercept.abs() < 1e-12);
        assert!((lr.predict(&[1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lr.standardizer.stds, vec![1.0]);

        let rows3 = vec![vec![2.0]; 4];
        let lr = LogisticRegression::fit(&rows3, &[1, 1, 1, 0], 1.0).unwrap();
        assert!((lr.predict(&[2.0]).unwrap() - 0.75).abs() < 1e-9);
    }

    #[test]
    fn fit_errors() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert!(matches!(LogisticRegression::fit(&rows, &[1, 1], 1.0), Err(Error::SingleClass)));
        assert!(matches!(
            LogisticRegression::fit(&[vec![f64::NAN], vec![1.0]], &[0, 1], 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(LogisticRegression::fit(&rows[..1], &[1], 1.0).is_err());
        assert!(LogisticRegression::fit(&rows, &[0, 1], -1.0).is_err());
    }

    #[test]
    fn predict_examples() {
        let model = LogRegModel {
            subset: FeatureSubset::Hf,
            component_names: vec![],
            weights: vec![0.0; 4],
            intercept: 0.0,
            lambda: 1.0,
            feature_means: vec![0.0; 4],
            feature_stds: vec![1.0; 4],
        };
        let x = FeatureVector { subset: FeatureSubset::Hf, values: vec![3.0, -1.0, 2.0, 9.0] };
        assert_eq!(predict(&model, &x).unwrap(), 0.5);

        let m2 = LogRegModel { weights: vec![0.3, -1.0, 2.0, 0.1], intercept: 0.4, ..model.clone() };
        let neg = LogRegModel {
            weights: m2.weights.iter().map(|w| -w).collect(),
            intercept: -m2.intercept,
            ..m2.clone()
        };
        let p = predict(&m2, &x).unwrap();
        assert!((predict(&neg, &x).unwrap() - (1.0 - p)).abs() < 1e-15);

        let wrong = FeatureVector { subset: FeatureSubset::Dlf, values: vec![0.0; 5] };
        assert!(predict(&model, &wrong).is_err());
        let nan = FeatureVector { subset: FeatureSubset::Hf, values: vec![f64::NAN; 4] };
        assert!(predict(&model, &nan).is_err());
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let x: Vec<f64> = (0..d).map(|j| rng.random_range(-2.0..2.0) * (j + 1) as f64).collect();
            let p = sigmoid(dot(&beta, &x) / d as f64);
            rows.push(x);
            labels.push(if i < 2 { i as u8 } else { u8::from(rng.random::<f64>() < p) });
        }
        (rows, labels)
    }

    #[test]
    fn mean_input_predicts_sigmoid_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, labels) = random_problem(&mut rng, 60, 4);
        let lr = LogisticRegression::fit(&rows, &labels, 0.1).unwrap();
        let p = lr.predict(&lr.standardizer.means.clone()).unwrap();
        assert!((p - sigmoid(lr.intercept)).abs() < 1e-15);
    }

    #[test]
    fn fit_reaches_gradient_tolerance_and_beats_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for lambda in [0.001, 0.1, 10.0] {
            let (rows, labels) = random_problem(&mut rng, 80, 8);
            let lr = LogisticRegression::fit(&rows, &labels, lambda).unwrap();
            let z: Vec<Vec<f64>> = rows.iter().map(|r| lr.standardizer.apply(r)).collect();
            let (f, g) = loss_and_gradient(&z, &labels, lambda, &lr.weights, lr.intercept);
            assert!(inf_norm(&g) <= GRAD_TOL);
            assert!(f <= loss(&z, &labels, lambda, &vec![0.0; 8], 0.0));
        }
    }

    #[test]
    fn duplicated_samples_give_same_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, labels) = random_problem(&mut rng, 40, 5);
        let a = LogisticRegression::fit(&rows, &labels, 0.05).unwrap();
        let rows2: Vec<_> = rows.iter().chain(&rows).cloned().collect();
        let labels2: Vec<_> = labels.iter().chain(&labels).copied().collect();
        let b = LogisticRegression::fit(&rows2, &labels2, 0.05).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-9);
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rows, labels) = random_problem(&mut rng, 50, 8);
        let a = LogisticRegression::fit(&rows, &labels, 0.3).unwrap();
        let b = LogisticRegression::fit(&rows, &labels, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_json_roundtrip_and_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<FeatureVector> = (0..30)
            .map(|_| FeatureVector {
                subset: FeatureSubset::Hf,
                values: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let labels: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let m = fit(&vectors, &labels, 0.1).unwrap();
        let json = m.to_json().unwrap();
        for key in ["\"subset\": \"hf\"", "\"weights\"", "\"intercept\"", "\"lambda\"", "\"means\"", "\"stds\"", "\"component_names\""] {
            assert!(json.contains(key), "{json}");
        }
        assert_eq!(LogRegModel::from_json(&json).unwrap(), m);

        let mags = coefficient_magnitudes(&m);
        let names: Vec<_> = mags.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["f_aphe", "f_ec", "f_npw", "size_mm"]);
        assert!(mags.iter().zip(&m.weights).all(|((_, a), w)| *a == w.abs()));

        let zero = LogRegModel { weights: vec![0.0; 4], ..m.clone() };
        assert!(coefficient_magnitudes(&zero).iter().all(|(_, v)| *v == 0.0));
        let neg = LogRegModel { weights: vec![-2.0, 1.0, 0.0, 0.5], ..m };
        let v: Vec<f64> = coefficient_magnitudes(&neg).into_iter().map(|(_, v)| v).collect();
        assert_eq!(v, vec![2.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn default_grid_shape() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 13);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[12] - 1e3).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn tune_single_grid_value() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert_eq!(tune_lambda(&rows, &[0, 1], &[0.7], 3, 1).unwrap().lambda, 0.7);
        assert!(tune_lambda(&rows, &[0, 1], &[], 3, 1).is_err());
    }

    #[test]
    fn tune_ties_go_to_largest_lambda() {
        // one noise column: every λ yields the same ranking, so all AUCs tie
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<u8> = (0..60).map(|_| u8::from(rng.random::<bool>())).collect();
        let grid = default_lambda_grid();
        let sel = tune_lambda(&rows, &labels, &grid, 3, 7).unwrap();
        assert!(sel.tied);
        assert_eq!(sel.lambda, grid[12]);
    }

    #[test]
    fn tune_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rows, labels) = random_problem(&mut rng, 90, 4);
        let grid = default_lambda_grid();
        let sel = tune_lambda(&rows, &labels, &grid, 3, 2).unwrap();
        let i = grid.iter().position(|&l| l == sel.lambda).unwrap();
        assert!(sel.mean_aucs.iter().all(|&a| a <= sel.mean_aucs[i] + 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn affine_rescaling_leaves_predictions(seed in any::<u64>(), scale in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0], offset in -100.0f64..100.0, col in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, labels) = random_problem(&mut rng, 50, 4);
            let a = LogisticRegression::fit(&rows, &labels, 0.05).unwrap();
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| {
                let mut r = r.clone();
                r[col] = r[col] * scale + offset;
                r
            }).collect();
            let b = LogisticRegression::fit(&moved, &labels, 0.05).unwrap();
            for (x, y) in rows.iter().zip(&moved) {
                prop_assert!((a.predict(x).unwrap() - b.predict(y).unwrap()).abs() <= 1e-9);
            }
        }

        #[test]
        fn final_loss_below_zero_vector(seed in any::<u64>(), lambda in 0.001f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, labels) = random_problem(&mut rng, 40, 5);
            let lr = LogisticRegression::fit(&rows, &labels, lambda).unwrap();
            let z: Vec<Vec<f64>> = rows.iter().map(|r| lr.standardizer.apply(r)).collect();
            prop_assert!(lr.training_loss(&rows, &labels) <= loss(&z, &labels, lambda, &[0.0; 5], 0.0));
        }
    }
}
