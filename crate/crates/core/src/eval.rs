//! AUC, stratified folds, the cross-validation and transfer protocols, and
//! report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, assemble, coefficient_magnitudes, default_lambda_grid, load_deep_probs, tune_lambda,
    Component, DeepProbs, FeatureSubset,
};
use crate::radiomics::HandcraftedFeatures;

/// Mann-Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores contain NaN".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                pos_rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fold index per sample: each class is shuffled with one seeded generator
/// (positives first, then negatives) and dealt round-robin, the deal
/// continuing across classes.
pub fn stratified_assignment(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.len() + neg.len() != labels.len() {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    for (name, class) in [("positive", &pos), ("negative", &neg)] {
        if class.len() < k {
            return Err(Error::InvalidArgument(format!(
                "{name} class has {} members, fewer than k = {k}; lower k or add cases",
                class.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        out[i] = slot % k;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    /// `[negatives, positives]` per fold.
    pub class_counts: Vec<[usize; 2]>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn to_csv(&self, labels: &BTreeMap<String, u8>) -> String {
        let mut out = String::from("lesion_id,fold,label\n");
        for (id, f) in &self.assignments {
            let label = labels.get(id).map_or(String::new(), u8::to_string);
            let _ = writeln!(out, "{id},{f},{label}");
        }
        out
    }
}

/// Stratified split keyed by lesion id; input order does not matter.
pub fn stratified_folds(labels: &[(String, u8)], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut sorted: Vec<&(String, u8)> = labels.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!("duplicate lesion_id {}", w[0].0)));
    }
    let flat: Vec<u8> = sorted.iter().map(|(_, l)| *l).collect();
    let folds = stratified_assignment(&flat, k, seed)?;
    let mut class_counts = vec![[0usize; 2]; k];
    let mut assignments = BTreeMap::new();
    for ((id, label), f) in sorted.iter().map(|p| (&p.0, p.1)).zip(folds) {
        class_counts[f][usize::from(label)] += 1;
        assignments.insert(id.clone(), f);
    }
    Ok(FoldSplit {
        k,
        seed,
        assignments,
        class_counts,
    })
}

/// LR-1..LR-5 mapped onto [0, 1] by dividing by 5.
pub fn lirads_to_prob(score: u8) -> Result<f64> {
    if (1..=5).contains(&score) {
        Ok(f64::from(score) / 5.0)
    } else {
        Err(Error::InvalidArgument(format!("LI-RADS score must be 1..5, got {score}")))
    }
}

#[derive(Deserialize)]
struct RadiologistRow {
    lesion_id: String,
    lirads_score: u8,
}

/// Strict loader for `lesion_id,lirads_score` files.
pub fn load_radiologist_scores(path: impl AsRef<Path>) -> Result<BTreeMap<String, u8>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<RadiologistRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        lirads_to_prob(row.lirads_score).map_err(|e| Error::csv(path, format!("{}: {e}", row.lesion_id)))?;
        if out.insert(row.lesion_id.clone(), row.lirads_score).is_some() {
            return Err(Error::csv(path, format!("duplicate lesion_id {}", row.lesion_id)));
        }
    }
    Ok(out)
}

/// Where deep probabilities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbSource {
    /// No deep model: only the HF subset can be evaluated.
    None,
    /// `probs_fold{j}.csv` for j in `0..k`, from the model that held out fold j.
    PerFold(Vec<BTreeMap<String, DeepProbs>>),
    /// One global file; validation scores may come from a model that saw them.
    Leaky(BTreeMap<String, DeepProbs>),
}

pub fn fold_probs_path(dir: impl AsRef<Path>, fold: usize) -> PathBuf {
    dir.as_ref().join(format!("probs_fold{fold}.csv"))
}

impl ProbSource {
    /// Discovers `probs_fold{j}.csv` files, falling back to `probs.csv` only
    /// when `allow_leaky` is set.
    pub fn from_dir(dir: impl AsRef<Path>, k: usize, allow_leaky: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let present: Vec<bool> = (0..k).map(|j| fold_probs_path(dir, j).is_file()).collect();
        if present.iter().all(|&p| p) {
            let maps = (0..k)
                .map(|j| load_deep_probs(fold_probs_path(dir, j)))
                .collect::<Result<Vec<_>>>()?;
            return Ok(ProbSource::PerFold(maps));
        }
        if present.iter().any(|&p| p) {
            let missing: Vec<String> = (0..k)
                .filter(|&j| !present[j])
                .map(|j| fold_probs_path(dir, j).display().to_string())
                .collect();
            return Err(Error::Missing(format!("per-fold probability files: {}", missing.join(", "))));
        }
        let global = dir.join("probs.csv");
        if global.is_file() {
            if allow_leaky {
                return Ok(ProbSource::Leaky(load_deep_probs(global)?));
            }
            return Err(Error::Missing(format!(
                "no probs_fold{{j}}.csv in {}; only probs.csv exists, which requires the leaky-probs acknowledgment",
                dir.display()
            )));
        }
        Err(Error::Missing(format!(
            "no probability files (probs_fold{{j}}.csv or probs.csv) in {}",
            dir.display()
        )))
    }

    fn for_fold(&self, fold: usize) -> Result<Option<&BTreeMap<String, DeepProbs>>> {
        match self {
            ProbSource::None => Ok(None),
            ProbSource::Leaky(m) => Ok(Some(m)),
            ProbSource::PerFold(v) => v
                .get(fold)
                .map(Some)
                .ok_or_else(|| Error::Missing(format!("probabilities for fold {fold}"))),
        }
    }

    pub fn is_leaky(&self) -> bool {
        matches!(self, ProbSource::Leaky(_))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, ProbSource::None)
    }
}

/// Labelled cases with their handcrafted features and deep probabilities.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub labels: BTreeMap<String, u8>,
    pub features: BTreeMap<String, HandcraftedFeatures>,
    pub probs: ProbSource,
    /// Named reader → LI-RADS score per lesion.
    pub radiologists: Vec<(String, BTreeMap<String, u8>)>,
}

impl EvalDataset {
    pub fn new(
        labels: impl IntoIterator<Item = (String, u8)>,
        features: impl IntoIterator<Item = HandcraftedFeatures>,
        probs: ProbSource,
    ) -> Result<Self> {
        let labels: BTreeMap<String, u8> = labels.into_iter().collect();
        let mut feat = BTreeMap::new();
        for f in features {
            if let Some(prev) = feat.insert(f.lesion_id.clone(), f) {
                return Err(Error::InvalidArgument(format!("duplicate features for {}", prev.lesion_id)));
            }
        }
        let missing: Vec<&str> = labels.keys().filter(|id| !feat.contains_key(*id)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Missing(format!("features for {}", missing.join(", "))));
        }
        Ok(EvalDataset {
            labels,
            features: feat,
            probs,
            radiologists: Vec::new(),
        })
    }

    pub fn label_pairs(&self) -> Vec<(String, u8)> {
        self.labels.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    fn rows(
        &self,
        ids: &[&str],
        subset: FeatureSubset,
        probs: Option<&BTreeMap<String, DeepProbs>>,
    ) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
        let mut missing = Vec::new();
        let mut rows = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = probs.and_then(|m| m.get(id));
            if subset.needs_probs() && p.is_none() {
                missing.push(id);
                continue;
            }
            rows.push(assemble(&self.features[id], p, subset)?.values);
            labels.push(self.labels[id]);
        }
        if !missing.is_empty() {
            return Err(Error::Missing(format!("deep probabilities for {}", missing.join(", "))));
        }
        Ok((rows, labels))
    }

    fn baseline_scores(&self, ids: &[&str], probs: &BTreeMap<String, DeepProbs>) -> Result<(Vec<f64>, Vec<u8>)> {
        let missing: Vec<&str> = ids.iter().copied().filter(|id| !probs.contains_key(*id)).collect();
        if !missing.is_empty() {
            return Err(Error::Missing(format!("deep probabilities for {}", missing.join(", "))));
        }
        Ok((
            ids.iter().map(|id| probs[*id].p_hcc).collect(),
            ids.iter().map(|id| self.labels[*id]).collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    pub lambda_grid: Vec<f64>,
    pub inner_folds: usize,
    pub subsets: Vec<FeatureSubset>,
    /// Row label in the text report, e.g. the deep backbone name.
    pub model_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            seed: 0,
            lambda_grid: default_lambda_grid(),
            inner_folds: 3,
            subsets: FeatureSubset::ALL.to_vec(),
            model_name: "fusion".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CrossValidation,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFold {
    pub subset: FeatureSubset,
    pub auc: f64,
    pub lambda: f64,
    pub lambda_tied: bool,
    /// `|w|` per component on the standardised scale, canonical order.
    pub coefficients: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_eval_positive: usize,
    pub baseline_auc: Option<f64>,
    pub variants: Vec<VariantFold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub fold_aucs: Vec<f64>,
    pub mean: f64,
    /// Population (k-denominator) standard deviation over folds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiologistResult {
    pub reader: String,
    pub n: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub model_name: String,
    pub k: usize,
    pub seed: u64,
    pub n_train_cases: usize,
    pub n_test_cases: Option<usize>,
    pub lambda_grid: Vec<f64>,
    pub inner_folds: usize,
    pub leaky_probs: bool,
    pub std_convention: String,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<VariantSummary>,
    /// mean(DLF+HF) − mean(DL baseline), in AUC points (× 100).
    pub improvement_points: Option<f64>,
    /// Mean `|w|` across folds per subset, canonical component order.
    pub mean_coefficients: BTreeMap<String, Vec<(String, f64)>>,
    pub radiologists: Vec<RadiologistResult>,
}

pub const BASELINE: &str = "DL_baseline";

fn variant_key(subset: FeatureSubset) -> &'static str {
    match subset {
        FeatureSubset::Dlf => "DLF",
        FeatureSubset::Hf => "HF",
        FeatureSubset::DlfPlusHf => "DLF_PLUS_HF",
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_config(cfg: &EvalConfig, data: &EvalDataset) -> Result<()> {
    if cfg.subsets.is_empty() {
        return Err(Error::InvalidArgument("no feature subsets requested".into()));
    }
    if data.probs.is_none() {
        if let Some(s) = cfg.subsets.iter().find(|s| s.needs_probs()) {
            return Err(Error::Missing(format!("deep probabilities required for subset {s}")));
        }
    }
    if let ProbSource::PerFold(v) = &data.probs {
        if v.len() != cfg.k {
            return Err(Error::Missing(format!(
                "{} per-fold probability files for k = {}",
                v.len(),
                cfg.k
            )));
        }
    }
    Ok(())
}

/// Fits every requested subset on `train_ids` of `train` and scores `eval_ids` of `target`.
fn run_fold(
    cfg: &EvalConfig,
    fold: usize,
    train: &EvalDataset,
    train_ids: &[&str],
    target: &EvalDataset,
    eval_ids: &[&str],
) -> Result<FoldResult> {
    let train_probs = train.probs.for_fold(fold)?;
    let eval_probs = target.probs.for_fold(fold)?;
    let baseline_auc = match eval_probs {
        Some(p) => {
            let (s, y) = target.baseline_scores(eval_ids, p)?;
            Some(auc(&s, &y)?)
        }
        None => None,
    };
    let mut variants = Vec::new();
    for &subset in &cfg.subsets {
        let (x, y) = train.rows(train_ids, subset, train_probs)?;
        let inner_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64 + 1);
        let sel = tune_lambda(&x, &y, &cfg.lambda_grid, cfg.inner_folds, inner_seed)?;
        let vectors: Vec<model::FeatureVector> = x
            .into_iter()
            .map(|values| model::FeatureVector { subset, values })
            .collect();
        let fitted = model::fit(&vectors, &y, sel.lambda)?;
        let (ex, ey) = target.rows(eval_ids, subset, eval_probs)?;
        let scores = ex
            .into_iter()
            .map(|values| model::predict(&fitted, &model::FeatureVector { subset, values }))
            .collect::<Result<Vec<f64>>>()?;
        log::debug!(
            "event=fold_fit fold={fold} subset={subset} lambda={} tied={}",
            sel.lambda,
            sel.tied
        );
        variants.push(VariantFold {
            subset,
            auc: auc(&scores, &ey)?,
            lambda: sel.lambda,
            lambda_tied: sel.tied,
            coefficients: coefficient_magnitudes(&fitted),
        });
    }
    Ok(FoldResult {
        fold,
        n_train: train_ids.len(),
        n_eval: eval_ids.len(),
        n_eval_positive: eval_ids.iter().filter(|id| target.labels[**id] == 1).count(),
        baseline_auc,
        variants,
    })
}

fn assemble_report(
    cfg: &EvalConfig,
    protocol: Protocol,
    train: &EvalDataset,
    test: Option<&EvalDataset>,
    folds: Vec<FoldResult>,
) -> Result<EvalReport> {
    let mut summary = Vec::new();
    if folds.iter().all(|f| f.baseline_auc.is_some()) {
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.baseline_auc).collect();
        let (mean, std) = mean_std(&aucs);
        summary.push(VariantSummary {
            variant: BASELINE.into(),
            fold_aucs: aucs,
            mean,
            std,
        });
    }
    let mut mean_coefficients = BTreeMap::new();
    for (i, &subset) in cfg.subsets.iter().enumerate() {
        let aucs: Vec<f64> = folds.iter().map(|f| f.variants[i].auc).collect();
        let (mean, std) = mean_std(&aucs);
        summary.push(VariantSummary {
            variant: variant_key(subset).into(),
            fold_aucs: aucs,
            mean,
            std,
        });
        let names = subset.components();
        let coefs: Vec<(String, f64)> = names
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                let m = folds.iter().map(|f| f.variants[i].coefficients[c].1).sum::<f64>() / folds.len() as f64;
                (comp.name().to_string(), m)
            })
            .collect();
        mean_coefficients.insert(subset.as_str().to_string(), coefs);
    }
    let find = |key: &str| summary.iter().find(|s| s.variant == key).map(|s| s.mean);
    let improvement_points = match (find(variant_key(FeatureSubset::DlfPlusHf)), find(BASELINE)) {
        (Some(a), Some(b)) => Some(100.0 * (a - b)),
        _ => None,
    };

    let scored = test.unwrap_or(train);
    let mut radiologists = Vec::new();
    for (reader, scores) in &scored.radiologists {
        let ids: Vec<&String> = scored.labels.keys().filter(|id| scores.contains_key(*id)).collect();
        let s = ids.iter().map(|id| lirads_to_prob(scores[*id])).collect::<Result<Vec<f64>>>()?;
        let y: Vec<u8> = ids.iter().map(|id| scored.labels[*id]).collect();
        radiologists.push(RadiologistResult {
            reader: reader.clone(),
            n: ids.len(),
            auc: auc(&s, &y)?,
        });
    }

    Ok(EvalReport {
        protocol,
        model_name: cfg.model_name.clone(),
        k: cfg.k,
        seed: cfg.seed,
        n_train_cases: train.labels.len(),
        n_test_cases: test.map(|t| t.labels.len()),
        lambda_grid: cfg.lambda_grid.clone(),
        inner_folds: cfg.inner_folds,
        leaky_probs: train.probs.is_leaky() || test.is_some_and(|t| t.probs.is_leaky()),
        std_convention: "population".into(),
        folds,
        summary,
        improvement_points,
        mean_coefficients,
        radiologists,
    })
}

/// Stratified k-fold CV: per fold, tune λ and fit on the other folds, then
/// score the held-out fold.
pub fn cross_validate(data: &EvalDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    check_config(cfg, data)?;
    let split = stratified_folds(&data.label_pairs(), cfg.k, cfg.seed)?;
    let folds = (0..cfg.k)
        .map(|j| {
            let train_ids: Vec<&str> = split.assignments.iter().filter(|(_, &f)| f != j).map(|(id, _)| id.as_str()).collect();
            let val_ids = split.members(j);
            run_fold(cfg, j, data, &train_ids, data, &val_ids)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_report(cfg, Protocol::CrossValidation, data, None, folds)
}

/// Same folds on the training set as [`cross_validate`], but each fold's
/// model is scored on the whole test set.
pub fn transfer_evaluate(train: &EvalDataset, test: &EvalDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    check_config(cfg, train)?;
    check_config(cfg, test)?;
    let overlap: BTreeSet<&String> = train.labels.keys().filter(|id| test.labels.contains_key(*id)).collect();
    if !overlap.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train and test sets share {} lesion ids (first: {})",
            overlap.len(),
            overlap.iter().next().map_or("", |s| s.as_str())
        )));
    }
    let split = stratified_folds(&train.label_pairs(), cfg.k, cfg.seed)?;
    let test_ids: Vec<&str> = test.labels.keys().map(String::as_str).collect();
    let folds = (0..cfg.k)
        .map(|j| {
            let train_ids: Vec<&str> = split.assignments.iter().filter(|(_, &f)| f != j).map(|(id, _)| id.as_str()).collect();
            run_fold(cfg, j, train, &train_ids, test, &test_ids)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_report(cfg, Protocol::Transfer, train, Some(test), folds)
}

fn pm(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

fn coefficient_cell(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s}{}", " ".repeat(widths[c] - s.chars().count())))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

impl EvalReport {
    pub fn variant(&self, key: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == key)
    }

    pub fn subset_summary(&self, subset: FeatureSubset) -> Option<&VariantSummary> {
        self.variant(variant_key(subset))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let title = match self.protocol {
            Protocol::CrossValidation => format!(
                "{}-fold cross-validation AUCs (%), n = {}, seed = {}",
                self.k, self.n_train_cases, self.seed
            ),
            Protocol::Transfer => format!(
                "Transfer AUCs (%), {} folds of n = {} evaluated on the full test set (n = {}), seed = {}",
                self.k,
                self.n_train_cases,
                self.n_test_cases.unwrap_or(0),
                self.seed
            ),
        };
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "mean ± std over {} folds; std uses the population convention (divides by k = {})",
            self.k, self.k
        );
        if self.leaky_probs {
            let _ = writeln!(out, "WARNING: one global probability file was used for all folds (leaky)");
        }
        out.push('\n');

        let cell = |key: &str| self.variant(key).map_or("n/a".to_string(), |s| pm(s.mean, s.std));
        let improvement = self
            .improvement_points
            .map_or("n/a".to_string(), |d| format!("{d:+.1}"));
        let rows = vec![
            ["Model", "DL baseline", "DLF", "HF", "DLF+HF", "↑ w.r.t baseline"]
                .map(String::from)
                .to_vec(),
            vec![
                self.model_name.clone(),
                cell(BASELINE),
                cell("DLF"),
                cell("HF"),
                cell("DLF_PLUS_HF"),
                improvement,
            ],
        ];
        out.push_str(&table(&rows));

        if !self.radiologists.is_empty() {
            out.push('\n');
            let mut rows = vec![vec!["Reader".to_string(), "n".into(), "AUC (%)".into()]];
            for r in &self.radiologists {
                rows.push(vec![r.reader.clone(), r.n.to_string(), format!("{:.1}", 100.0 * r.auc)]);
            }
            out.push_str(&table(&rows));
        }

        out.push_str("\nPer fold\n");
        let mut header = vec!["Fold".to_string(), "n".into(), "pos".into(), "DL baseline".into()];
        let subsets: Vec<FeatureSubset> = self
            .folds
            .first()
            .map(|f| f.variants.iter().map(|v| v.subset).collect())
            .unwrap_or_default();
        for s in &subsets {
            header.push(s.label().to_string());
            header.push(format!("λ {}", s.label()));
        }
        let mut rows = vec![header];
        for f in &self.folds {
            let mut row = vec![
                f.fold.to_string(),
                f.n_eval.to_string(),
                f.n_eval_positive.to_string(),
                f.baseline_auc.map_or("n/a".into(), |a| format!("{:.1}", 100.0 * a)),
            ];
            for v in &f.variants {
                row.push(format!("{:.1}", 100.0 * v.auc));
                row.push(format!("{:.3e}{}", v.lambda, if v.lambda_tied { "*" } else { "" }));
            }
            rows.push(row);
        }
        out.push_str(&table(&rows));

        out.push_str("\nMean |coefficient| over folds (standardised features)\n");
        let mut header = vec!["Subset".to_string()];
        header.extend(Component::ALL.iter().map(|c| c.name().to_string()));
        let mut rows = vec![header];
        for s in &subsets {
            let Some(coefs) = self.mean_coefficients.get(s.as_str()) else {
                continue;
            };
            let mut row = vec![s.label().to_string()];
            for c in Component::ALL {
                row.push(
                    coefs
                        .iter()
                        .find(|(n, _)| n == c.name())
                        .map_or("-".into(), |(_, v)| coefficient_cell(*v)),
                );
            }
            rows.push(row);
        }
        out.push_str(&table(&rows));

        out.push_str(
            "\nNotes\n\
             - λ marked * was tied on inner-fold AUC; ties go to the larger λ.\n\
             - HF is reported for this row's own λ selection, not averaged over rows.\n\
             - ↑ w.r.t baseline = mean(DLF+HF) − mean(DL baseline), in AUC points.\n",
        );
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.render_text()).map_err(|e| Error::io(&txt, e))
    }
}
