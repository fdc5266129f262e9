//! `lirads`: phantom generation, preprocessing, patch export, handcrafted
//! features and fusion evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use lirads_core::eval::{
    cross_validate, load_radiologist_scores, stratified_folds, transfer_evaluate, EvalConfig, EvalDataset,
    ProbSource,
};
use lirads_core::manifest::{CaseEntry, Manifest};
use lirads_core::model::{default_lambda_grid, FeatureSubset};
use lirads_core::phantom::{generate_dataset, stub_fold_probs, stub_probs, write_fold_probs, PhantomConfig};
use lirads_core::preprocess::{extract_patch, preprocess_case, write_patch, PatchMode};
use lirads_core::radiomics::{compute_features, read_features_csv, write_features_csv, HandcraftedFeatures};
use lirads_core::volume::io::{read_mask, write_mask, write_volume};
use lirads_core::volume::Spacing;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "lirads", version, about = "LI-RADS guided HCC classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-phase dataset with a manifest.
    Phantom(PhantomArgs),
    /// Register phases to the portal scan and resample to 0.76 x 0.76 x 2.00 mm.
    Preprocess(PreprocessArgs),
    /// Export 96 x 96 x 24 multi-channel patches around each lesion.
    Patches(PatchesArgs),
    /// Compute f_aphe, f_ec, f_npw and lesion size for every case.
    Features(FeaturesArgs),
    /// Cross-validate (or transfer-evaluate) the fusion model.
    Evaluate(EvaluateArgs),
    /// Write stand-in per-fold probability files for a labelled manifest.
    StubProbs(StubProbsArgs),
    /// Write the stratified fold assignment used by `evaluate`.
    Folds(FoldsArgs),
}

#[derive(Args)]
struct Jobs {
    /// Worker threads for per-case stages (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct PhantomArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    n_cases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct PatchesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: PatchMode,
    #[arg(long)]
    outdir: PathBuf,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Features CSV for the manifest cases.
    #[arg(long)]
    features: PathBuf,
    /// Directory holding probs_fold{j}.csv (or probs.csv with --leaky-probs).
    #[arg(long)]
    probs_dir: Option<PathBuf>,
    /// Feature subsets to fit; repeatable. Default: all three with probabilities, else hf.
    #[arg(long, value_parser = parse_subset)]
    subset: Vec<FeatureSubset>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated λ values (default: 13 log-spaced values in [1e-3, 1e3]).
    #[arg(long, value_parser = parse_grid)]
    lambda_grid: Option<Grid>,
    #[arg(long, default_value_t = 3)]
    inner_folds: usize,
    /// Switches to the transfer protocol, scoring every fold on this set.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long, requires = "test_manifest")]
    test_features: Option<PathBuf>,
    /// Probabilities for the test set (default: --probs-dir).
    #[arg(long, requires = "test_manifest")]
    test_probs_dir: Option<PathBuf>,
    /// Accept a single probs.csv for all folds.
    #[arg(long)]
    leaky_probs: bool,
    /// Reader scores as NAME=CSV with columns lesion_id,lirads_score; repeatable.
    #[arg(long)]
    radiologist: Vec<String>,
    /// Row label in the report (default: the probabilities directory name).
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct StubProbsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Probability of flipping each target before drawing.
    #[arg(long, default_value_t = 0.3)]
    flip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a single global probs.csv.
    #[arg(long)]
    global: bool,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone)]
struct Grid(Vec<f64>);

fn parse_mode(s: &str) -> Result<PatchMode, String> {
    s.parse().map_err(|e: lirads_core::Error| e.to_string())
}

fn parse_subset(s: &str) -> Result<FeatureSubset, String> {
    s.parse().map_err(|e: lirads_core::Error| e.to_string())
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err("λ values must be finite and >= 0".into());
    }
    Ok(Grid(values))
}

/// Configuration problems exit with 2, everything else with 3.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<lirads_core::Error> for Failure {
    fn from(e: lirads_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn config_err(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

fn require_file(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} is not a directory", p.display())))
    }
}

fn pool(jobs: &Jobs) -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs.jobs {
        if n == 0 {
            return Err(config_err("--jobs must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| config_err(format!("thread pool: {e}")))
}

fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    require_file(path, "manifest")?;
    Ok(Manifest::read(path)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Data)
}

fn skip(entry: &CaseEntry, reason: impl std::fmt::Display) {
    log::warn!("event=skip lesion_id={} reason=\"{reason}\"", entry.lesion_id);
}

fn cmd_phantom(a: PhantomArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "phantom config")?;
            PhantomConfig::from_json_file(p).map_err(|e| config_err(e))?
        }
        None => PhantomConfig::default(),
    };
    if let Some(n) = a.n_cases {
        cfg.n_cases = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.noise_std {
        cfg.noise_std = s;
    }
    cfg.validate().map_err(config_err)?;
    let ds = generate_dataset(&cfg, &a.outdir)?;
    let n_hcc = ds.truths.iter().filter(|t| t.label == 1).count();
    log::info!(
        "event=phantom_done cases={} hcc={n_hcc} manifest={}",
        ds.truths.len(),
        ds.manifest_path.display()
    );
    Ok(())
}

fn preprocess_one(manifest: &Manifest, entry: &CaseEntry, outdir: &Path) -> lirads_core::Result<CaseEntry> {
    let mask = |p: &Option<PathBuf>| p.as_deref().map(|p| read_mask(manifest.resolve(p))).transpose();
    let arterial_liver = mask(&entry.arterial_liver_mask)?;
    let delayed_liver = mask(&entry.delayed_liver_mask)?;
    let case = manifest.load_case(entry)?;
    let (pre, shifts) = preprocess_case(case, arterial_liver.as_ref(), delayed_liver.as_ref(), Spacing::RESAMPLED)?;
    log::info!(
        "event=preprocessed lesion_id={} arterial_shift={} delayed_shift={} dims={:?}",
        entry.lesion_id,
        shifts.arterial,
        shifts.delayed,
        pre.portal.dims()
    );

    let rel = PathBuf::from("cases").join(&entry.lesion_id);
    fs::create_dir_all(outdir.join(&rel)).map_err(|e| lirads_core::Error::Io {
        path: outdir.join(&rel),
        source: e,
    })?;
    let file = |name: &str| rel.join(format!("{name}.hdr"));
    let mut out = CaseEntry::new(entry.lesion_id.clone());
    write_volume(&pre.arterial, outdir.join(file("arterial")))?;
    write_volume(&pre.portal, outdir.join(file("portal")))?;
    if let Some(d) = &pre.delayed {
        write_volume(d, outdir.join(file("delayed")))?;
        out.delayed = Some(file("delayed"));
    }
    write_mask(&pre.liver_mask, outdir.join(file("liver")))?;
    write_mask(&pre.lesion_mask, outdir.join(file("lesion")))?;
    if let Some(o) = &pre.other_lesions {
        write_mask(o, outdir.join(file("other_lesions")))?;
        out.other_lesion_masks = vec![file("other_lesions")];
    }
    out.arterial = Some(file("arterial"));
    out.portal = Some(file("portal"));
    out.liver_mask = Some(file("liver"));
    out.lesion_mask = Some(file("lesion"));
    out.label = entry.label;
    out.lirads = entry.lirads;
    Ok(out)
}

fn cmd_preprocess(a: PreprocessArgs) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    let pool = pool(&a.jobs)?;
    create_dir(&a.outdir)?;
    let results: Vec<Option<CaseEntry>> = pool.install(|| {
        manifest
            .cases
            .par_iter()
            .map(|entry| {
                if entry.arterial.is_none() || entry.portal.is_none() || entry.delayed.is_none() {
                    skip(entry, "missing one of the arterial, portal and delayed phases");
                    return None;
                }
                match preprocess_one(&manifest, entry, &a.outdir) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        skip(entry, e);
                        None
                    }
                }
            })
            .collect()
    });
    let entries: Vec<CaseEntry> = results.into_iter().flatten().collect();
    if entries.is_empty() {
        return Err(Failure::Data(anyhow!("no case could be preprocessed")));
    }
    let n = entries.len();
    let out = Manifest::new(&a.outdir, entries)?;
    out.write(a.outdir.join("manifest.jsonl"))?;
    log::info!("event=preprocess_done cases={n} skipped={}", manifest.cases.len() - n);
    Ok(())
}

fn cmd_patches(a: PatchesArgs) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    let pool = pool(&a.jobs)?;
    create_dir(&a.outdir)?;
    let written: Vec<bool> = pool.install(|| {
        manifest
            .cases
            .par_iter()
            .map(|entry| {
                let res = manifest
                    .load_case(entry)
                    .and_then(|case| extract_patch(&case, a.mode))
                    .and_then(|p| write_patch(&p, &a.outdir).map(|_| p));
                match res {
                    Ok(p) => {
                        log::info!(
                            "event=patch lesion_id={} mode={} coverage={:.4} warning={}",
                            p.lesion_id,
                            a.mode,
                            p.lesion_coverage,
                            p.coverage_warning
                        );
                        true
                    }
                    Err(e) => {
                        skip(entry, e);
                        false
                    }
                }
            })
            .collect()
    });
    let n = written.iter().filter(|&&w| w).count();
    log::info!("event=patches_done written={n} skipped={}", written.len() - n);
    if n == 0 {
        return Err(Failure::Data(anyhow!("no patch could be written")));
    }
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    let pool = pool(&a.jobs)?;
    let rows: Vec<Option<HandcraftedFeatures>> = pool.install(|| {
        manifest
            .cases
            .par_iter()
            .map(|entry| match manifest.load_case(entry).and_then(|c| compute_features(&c)) {
                Ok(f) => Some(f),
                Err(e) => {
                    skip(entry, e);
                    None
                }
            })
            .collect()
    });
    let rows: Vec<HandcraftedFeatures> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Failure::Data(anyhow!("no features could be computed")));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_features_csv(&rows, &a.out)?;
    log::info!(
        "event=features_done rows={} skipped={} out={}",
        rows.len(),
        manifest.cases.len() - rows.len(),
        a.out.display()
    );
    Ok(())
}

fn load_dataset(
    manifest_path: &Path,
    features_path: &Path,
    probs_dir: Option<&Path>,
    k: usize,
    leaky: bool,
) -> Result<EvalDataset, Failure> {
    let manifest = read_manifest(manifest_path)?;
    require_file(features_path, "features CSV")?;
    let features: BTreeMap<String, HandcraftedFeatures> = read_features_csv(features_path)?
        .into_iter()
        .map(|f| (f.lesion_id.clone(), f))
        .collect();
    let mut labels = Vec::new();
    for entry in &manifest.cases {
        match entry.label {
            None => skip(entry, "no label"),
            Some(_) if !features.contains_key(&entry.lesion_id) => skip(entry, "no features row"),
            Some(l) => labels.push((entry.lesion_id.clone(), l)),
        }
    }
    let probs = match probs_dir {
        Some(dir) => {
            require_dir(dir, "probabilities directory")?;
            ProbSource::from_dir(dir, k, leaky).map_err(|e| match e {
                lirads_core::Error::Missing(_) => config_err(e),
                other => other.into(),
            })?
        }
        None => ProbSource::None,
    };
    if probs.is_leaky() {
        log::warn!("event=leaky_probs dir={} reason=\"one global probs.csv used for every fold\"", probs_dir.unwrap_or(Path::new("")).display());
    }
    let wanted: Vec<HandcraftedFeatures> = labels.iter().map(|(id, _)| features[id].clone()).collect();
    Ok(EvalDataset::new(labels, wanted, probs)?)
}

fn cmd_evaluate(a: EvaluateArgs) -> Outcome {
    if a.k < 2 {
        return Err(config_err("--k must be >= 2"));
    }
    let mut train = load_dataset(&a.manifest, &a.features, a.probs_dir.as_deref(), a.k, a.leaky_probs)?;
    let test = match &a.test_manifest {
        Some(m) => {
            let features = a
                .test_features
                .as_deref()
                .ok_or_else(|| config_err("--test-manifest needs --test-features"))?;
            let probs = a.test_probs_dir.as_deref().or(a.probs_dir.as_deref());
            Some(load_dataset(m, features, probs, a.k, a.leaky_probs)?)
        }
        None => None,
    };

    let mut readers = Vec::new();
    for arg in &a.radiologist {
        let (name, path) = arg
            .split_once('=')
            .ok_or_else(|| config_err(format!("--radiologist expects NAME=CSV, got {arg:?}")))?;
        let path = Path::new(path);
        require_file(path, "radiologist CSV")?;
        readers.push((name.to_string(), load_radiologist_scores(path)?));
    }
    if test.is_none() {
        train.radiologists = readers.clone();
    }

    let subsets = if !a.subset.is_empty() {
        let mut s = a.subset.clone();
        s.sort();
        s.dedup();
        s
    } else if a.probs_dir.is_some() {
        FeatureSubset::ALL.to_vec()
    } else {
        vec![FeatureSubset::Hf]
    };
    if a.probs_dir.is_none() && subsets.iter().any(FeatureSubset::needs_probs) {
        return Err(config_err("dlf and dlf+hf subsets need --probs-dir"));
    }
    let model_name = a.model_name.clone().unwrap_or_else(|| {
        a.probs_dir
            .as_deref()
            .and_then(|p| p.file_name())
            .map_or("hf-only".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let cfg = EvalConfig {
        k: a.k,
        seed: a.seed,
        lambda_grid: a.lambda_grid.clone().map_or_else(default_lambda_grid, |g| g.0),
        inner_folds: a.inner_folds,
        subsets,
        model_name,
    };

    let report = match test {
        Some(mut t) => {
            t.radiologists = readers;
            transfer_evaluate(&train, &t, &cfg)?
        }
        None => cross_validate(&train, &cfg)?,
    };
    report.write(&a.outdir)?;
    let split = stratified_folds(&train.label_pairs(), cfg.k, cfg.seed)?;
    let folds_path = a.outdir.join("folds.csv");
    fs::write(&folds_path, split.to_csv(&train.labels))
        .with_context(|| format!("writing {}", folds_path.display()))?;
    print!("{}", report.render_text());
    log::info!("event=evaluate_done outdir={}", a.outdir.display());
    Ok(())
}

fn labelled_cases(manifest: &Manifest) -> Vec<(String, u8, Option<lirads_core::volume::LiradsFlags>)> {
    manifest
        .cases
        .iter()
        .filter_map(|e| match e.label {
            Some(l) => Some((e.lesion_id.clone(), l, e.lirads)),
            None => {
                skip(e, "no label");
                None
            }
        })
        .collect()
}

fn cmd_stub_probs(a: StubProbsArgs) -> Outcome {
    if a.k < 2 {
        return Err(config_err("--k must be >= 2"));
    }
    if !(0.0..=1.0).contains(&a.flip) {
        return Err(config_err("--flip must be in [0, 1]"));
    }
    let manifest = read_manifest(&a.manifest)?;
    let cases = labelled_cases(&manifest);
    let folds = stub_fold_probs(&cases, a.k, a.flip, a.seed)?;
    write_fold_probs(&folds, &a.outdir)?;
    if a.global {
        lirads_core::model::write_deep_probs(&stub_probs(&cases, a.flip, a.seed)?, a.outdir.join("probs.csv"))?;
    }
    log::info!("event=stub_probs_done cases={} folds={}", cases.len(), a.k);
    Ok(())
}

fn cmd_folds(a: FoldsArgs) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    let labels = manifest.labels();
    let split = stratified_folds(&labels, a.k, a.seed).map_err(|e| match e {
        lirads_core::Error::InvalidArgument(_) => config_err(e),
        other => other.into(),
    })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let labels: BTreeMap<String, u8> = labels.into_iter().collect();
    fs::write(&a.out, split.to_csv(&labels)).with_context(|| format!("writing {}", a.out.display()))?;
    for (j, c) in split.class_counts.iter().enumerate() {
        log::info!("event=fold fold={j} negatives={} positives={}", c[0], c[1]);
    }
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} {}", record.level(), record.args()))
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Patches(a) => cmd_patches(a),
        Command::Features(a) => cmd_features(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::StubProbs(a) => cmd_stub_probs(a),
        Command::Folds(a) => cmd_folds(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            log::error!("event=config_error error=\"{e:#}\"");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            log::error!("event=data_error error=\"{e:#}\"");
            ExitCode::from(3)
        }
    }
}
