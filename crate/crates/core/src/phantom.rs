//! Seeded synthetic multi-phase CT cases.
//!
//! Each case is an ellipsoidal liver of constant attenuation on a constant
//! background, with one spherical lesion. HCC lesions get arterial
//! hyperenhancement, a bright one-voxel arterial rim and portal/delayed
//! washout. Other lesions get at most one of those patterns at half
//! magnitude. White Gaussian noise is added and values are rounded to whole
//! HU, so the volumes survive INT16 storage unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fold_probs_path;
use crate::manifest::{CaseEntry, Manifest};
use crate::model::{write_deep_probs, DeepProbs};
use crate::preprocess::apply_z_shift;
use crate::radiomics::{lesion_border, PARENCHYMA_MARGIN};
use crate::volume::io::{write_mask, write_volume};
use crate::volume::{Geometry, LiradsFlags, Mask3D, PhaseSet, Spacing, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_cases: usize,
    pub hcc_fraction: f64,
    pub hcc_size_mean_mm: f64,
    pub hcc_size_std_mm: f64,
    pub non_hcc_size_mean_mm: f64,
    pub non_hcc_size_std_mm: f64,
    /// Sampled diameters are clamped to `[min_diameter_mm, max_diameter_mm]`.
    pub min_diameter_mm: f64,
    pub max_diameter_mm: f64,
    pub aphe_delta: f64,
    pub capsule_delta: f64,
    pub washout_delta: f64,
    pub noise_std: f64,
    pub liver_hu: f64,
    pub background_hu: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Liver semi-axes as a fraction of the field of view per axis.
    pub liver_semi_axis_fraction: f64,
    /// Maximum z misalignment (slices) applied to the arterial and delayed
    /// phases. Non-zero values also write per-phase liver masks.
    pub phase_z_jitter: u32,
    /// Lesion ids are `<id_prefix><index:04>`.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_cases: 200,
            hcc_fraction: 0.5,
            hcc_size_mean_mm: 19.3,
            hcc_size_std_mm: 5.6,
            non_hcc_size_mean_mm: 15.4,
            non_hcc_size_std_mm: 5.6,
            min_diameter_mm: 8.0,
            max_diameter_mm: 40.0,
            aphe_delta: 40.0,
            capsule_delta: 60.0,
            washout_delta: 30.0,
            noise_std: 10.0,
            liver_hu: 90.0,
            background_hu: 40.0,
            dims: [128, 128, 48],
            spacing: [0.76, 0.76, 2.0],
            liver_semi_axis_fraction: 0.42,
            phase_z_jitter: 0,
            id_prefix: "P".into(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PhantomConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn spacing(&self) -> Result<Spacing> {
        Spacing::new(self.spacing[0], self.spacing[1], self.spacing[2])
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing()?, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.hcc_fraction) {
            return bad(format!("hcc_fraction must be in [0, 1], got {}", self.hcc_fraction));
        }
        for (name, v) in [
            ("hcc_size_std_mm", self.hcc_size_std_mm),
            ("non_hcc_size_std_mm", self.non_hcc_size_std_mm),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("hcc_size_mean_mm", self.hcc_size_mean_mm),
            ("non_hcc_size_mean_mm", self.non_hcc_size_mean_mm),
            ("aphe_delta", self.aphe_delta),
            ("capsule_delta", self.capsule_delta),
            ("washout_delta", self.washout_delta),
            ("liver_hu", self.liver_hu),
            ("background_hu", self.background_hu),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains(|c: char| c == ',' || c == '/' || c.is_whitespace()) {
            return bad(format!("id_prefix {:?} must be non-empty without commas, slashes or spaces", self.id_prefix));
        }
        if !(self.min_diameter_mm >= 4.0) {
            return bad(format!("min_diameter_mm must be >= 4, got {}", self.min_diameter_mm));
        }
        if !(self.max_diameter_mm >= self.min_diameter_mm) {
            return bad("max_diameter_mm must be >= min_diameter_mm".into());
        }
        if !(self.liver_semi_axis_fraction > 0.0 && self.liver_semi_axis_fraction <= 0.5) {
            return bad("liver_semi_axis_fraction must be in (0, 0.5]".into());
        }
        self.geometry()?;
        if self.phase_z_jitter as usize * 2 >= self.dims[2] {
            return bad("phase_z_jitter must be smaller than half the slice count".into());
        }
        // the largest allowed lesion must fit
        self.max_centre_offset(self.max_diameter_mm)?;
        Ok(())
    }

    fn liver_semi_axes(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.liver_semi_axis_fraction * self.dims[a] as f64 * self.spacing[a])
    }

    fn centre_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0 * self.spacing[a])
    }

    /// Half-width (mm) of the cube the lesion centre is drawn from.
    fn max_centre_offset(&self, diameter_mm: f64) -> Result<f64> {
        let min_semi = self.liver_semi_axes().into_iter().fold(f64::INFINITY, f64::min);
        let max_step = self.spacing.into_iter().fold(0.0, f64::max);
        // keeps the dilated lesion and the rounded centre inside the liver
        let margin = (PARENCHYMA_MARGIN as f64 + 1.0) * max_step;
        let room = min_semi - diameter_mm / 2.0 - margin;
        if room < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "a {diameter_mm:.1} mm lesion does not fit in a liver with smallest semi-axis {min_semi:.1} mm"
            )));
        }
        Ok(room / 3f64.sqrt())
    }
}

/// Contrast patterns a case actually received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub lesion_id: String,
    pub label: u8,
    pub diameter_mm: f64,
    pub centre: [usize; 3],
    pub aphe_delta: f64,
    pub capsule_delta: f64,
    pub washout_delta: f64,
    pub lirads: LiradsFlags,
    pub arterial_shift: i64,
    pub delayed_shift: i64,
}

/// One generated case; the per-phase liver masks are set when jitter is on.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub phases: PhaseSet,
    pub arterial_liver: Option<Mask3D>,
    pub delayed_liver: Option<Mask3D>,
    pub truth: PhantomTruth,
}

pub fn lesion_id(prefix: &str, index: usize) -> String {
    format!("{prefix}{index:04}")
}

/// Labels by case index: exactly `round(n * hcc_fraction)` ones, in seeded order.
pub fn class_labels(cfg: &PhantomConfig) -> Vec<u8> {
    let n_hcc = (cfg.n_cases as f64 * cfg.hcc_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_cases).map(|i| u8::from(i < n_hcc)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    labels.shuffle(&mut rng);
    labels
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

enum Pattern {
    None,
    Aphe,
    Capsule,
    Washout,
}

pub fn generate_case(cfg: &PhantomConfig, index: usize) -> Result<PhantomCase> {
    if index >= cfg.n_cases {
        return Err(Error::InvalidArgument(format!(
            "case index {index} out of range for {} cases",
            cfg.n_cases
        )));
    }
    let label = class_labels(cfg)[index];
    generate_case_with_label(cfg, index, label)
}

/// Like [`generate_case`] with the class given explicitly.
pub fn generate_case_with_label(cfg: &PhantomConfig, index: usize, label: u8) -> Result<PhantomCase> {
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let mut rng = case_rng(cfg.seed, index);
    let id = lesion_id(&cfg.id_prefix, index);

    let (mean, std) = if label == 1 {
        (cfg.hcc_size_mean_mm, cfg.hcc_size_std_mm)
    } else {
        (cfg.non_hcc_size_mean_mm, cfg.non_hcc_size_std_mm)
    };
    let drawn = mean + std * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let diameter = drawn.clamp(cfg.min_diameter_mm, cfg.max_diameter_mm);
    let half = cfg.max_centre_offset(diameter)?;
    let c0 = cfg.centre_mm();
    let centre: [usize; 3] = std::array::from_fn(|a| {
        let off = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        ((c0[a] + off) / cfg.spacing[a]).round() as usize
    });

    let (aphe, capsule, washout) = if label == 1 {
        (cfg.aphe_delta, cfg.capsule_delta, cfg.washout_delta)
    } else {
        match [Pattern::None, Pattern::Aphe, Pattern::Capsule, Pattern::Washout][rng.random_range(0..4)] {
            Pattern::None => (0.0, 0.0, 0.0),
            Pattern::Aphe => (cfg.aphe_delta / 2.0, 0.0, 0.0),
            Pattern::Capsule => (0.0, cfg.capsule_delta / 2.0, 0.0),
            Pattern::Washout => (0.0, 0.0, cfg.washout_delta / 2.0),
        }
    };
    let lirads = LiradsFlags {
        aphe: u8::from(aphe != 0.0),
        ec: u8::from(capsule != 0.0),
        npw: u8::from(washout != 0.0),
    };

    let semi = cfg.liver_semi_axes();
    let s = cfg.spacing;
    let liver = Mask3D::from_fn(geometry, |x, y, z| {
        let p = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
        let r2: f64 = (0..3).map(|a| ((p[a] - c0[a]) / semi[a]).powi(2)).sum();
        u8::from(r2 <= 1.0)
    });
    let r2max = (diameter / 2.0).powi(2);
    let lesion = Mask3D::from_fn(geometry, |x, y, z| {
        let d = [x, y, z].map(|v| v as f64);
        let r2: f64 = (0..3).map(|a| ((d[a] - centre[a] as f64) * s[a]).powi(2)).sum();
        u8::from(r2 <= r2max)
    });
    if !lesion.is_subset_of(&liver)? {
        return Err(Error::InvalidArgument(format!("{id}: lesion does not fit in liver")));
    }
    let (_, rim) = lesion_border(&lesion, 1)?;

    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let mut render = |lesion_value: f64, rim_value: f64| -> Volume3D {
        let mut v = Volume3D::from_fn(geometry, |x, y, z| {
            if rim.is_set_at(x, y, z) {
                rim_value
            } else if lesion.is_set_at(x, y, z) {
                lesion_value
            } else if liver.is_set_at(x, y, z) {
                cfg.liver_hu
            } else {
                cfg.background_hu
            }
        });
        for value in v.data_mut() {
            let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *value = (*value + n).round().clamp(i16::MIN as f64, i16::MAX as f64);
        }
        v
    };
    let arterial = render(cfg.liver_hu + aphe, cfg.liver_hu + aphe + capsule);
    let portal = render(cfg.liver_hu - washout, cfg.liver_hu - washout);
    let delayed = render(cfg.liver_hu - washout, cfg.liver_hu - washout);

    let j = cfg.phase_z_jitter as i64;
    let (mut a_shift, mut d_shift) = (0, 0);
    let (mut arterial, mut delayed) = (arterial, delayed);
    let (mut arterial_liver, mut delayed_liver) = (None, None);
    if j > 0 {
        a_shift = rng.random_range(-j..=j);
        d_shift = rng.random_range(-j..=j);
        let fill = cfg.background_hu.round();
        arterial = apply_z_shift(&arterial, a_shift, fill)?;
        delayed = apply_z_shift(&delayed, d_shift, fill)?;
        arterial_liver = Some(apply_z_shift(&liver, a_shift, 0)?);
        delayed_liver = Some(apply_z_shift(&liver, d_shift, 0)?);
    }

    Ok(PhantomCase {
        phases: PhaseSet {
            lesion_id: id.clone(),
            arterial,
            portal,
            delayed: Some(delayed),
            liver_mask: liver,
            lesion_mask: lesion,
            other_lesions: None,
            label: Some(label),
            lirads: Some(lirads),
        },
        arterial_liver,
        delayed_liver,
        truth: PhantomTruth {
            lesion_id: id,
            label,
            diameter_mm: diameter,
            centre,
            aphe_delta: aphe,
            capsule_delta: capsule,
            washout_delta: washout,
            lirads,
            arterial_shift: a_shift,
            delayed_shift: d_shift,
        },
    })
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub truths: Vec<PhantomTruth>,
}

pub const TRUTH_HEADER: &str =
    "lesion_id,label,diameter_mm,aphe_delta,capsule_delta,washout_delta,arterial_shift,delayed_shift";

/// Writes every case under `outdir/cases/<id>/`, plus `manifest.jsonl`,
/// `truth.csv` and the config used.
pub fn generate_dataset(cfg: &PhantomConfig, outdir: impl AsRef<Path>) -> Result<PhantomDataset> {
    cfg.validate()?;
    let outdir = outdir.as_ref();
    let labels = class_labels(cfg);
    let mut entries = Vec::with_capacity(cfg.n_cases);
    let mut truths = Vec::with_capacity(cfg.n_cases);
    for (i, &label) in labels.iter().enumerate() {
        let case = generate_case_with_label(cfg, i, label)?;
        let (entry, truth) = write_case(&case, outdir)?;
        log::debug!("event=phantom_case lesion_id={} label={label}", truth.lesion_id);
        entries.push(entry);
        truths.push(truth);
    }
    let manifest = Manifest::new(outdir, entries)?;
    let manifest_path = outdir.join("manifest.jsonl");
    manifest.write(&manifest_path)?;

    let mut csv = format!("{TRUTH_HEADER}\n");
    for t in &truths {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.lesion_id,
            t.label,
            t.diameter_mm,
            t.aphe_delta,
            t.capsule_delta,
            t.washout_delta,
            t.arterial_shift,
            t.delayed_shift
        ));
    }
    let truth_path = outdir.join("truth.csv");
    fs::write(&truth_path, csv).map_err(|e| Error::io(&truth_path, e))?;
    let cfg_path = outdir.join("phantom_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(PhantomDataset {
        manifest_path,
        manifest,
        truths,
    })
}

/// Writes one case's files and returns its manifest entry (paths relative to `outdir`).
pub fn write_case(case: &PhantomCase, outdir: &Path) -> Result<(CaseEntry, PhantomTruth)> {
    let id = &case.truth.lesion_id;
    let rel = PathBuf::from("cases").join(id);
    let dir = outdir.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = &case.phases;
    let mut entry = CaseEntry::new(id.clone());
    let file = |name: &str| rel.join(format!("{name}.hdr"));

    write_volume(&p.arterial, outdir.join(file("arterial")))?;
    write_volume(&p.portal, outdir.join(file("portal")))?;
    if let Some(d) = &p.delayed {
        write_volume(d, outdir.join(file("delayed")))?;
        entry.delayed = Some(file("delayed"));
    }
    write_mask(&p.liver_mask, outdir.join(file("liver")))?;
    write_mask(&p.lesion_mask, outdir.join(file("lesion")))?;
    if let Some(m) = &case.arterial_liver {
        write_mask(m, outdir.join(file("arterial_liver")))?;
        entry.arterial_liver_mask = Some(file("arterial_liver"));
    }
    if let Some(m) = &case.delayed_liver {
        write_mask(m, outdir.join(file("delayed_liver")))?;
        entry.delayed_liver_mask = Some(file("delayed_liver"));
    }
    entry.arterial = Some(file("arterial"));
    entry.portal = Some(file("portal"));
    entry.liver_mask = Some(file("liver"));
    entry.lesion_mask = Some(file("lesion"));
    entry.label = p.label;
    entry.lirads = p.lirads;
    Ok((entry, case.truth.clone()))
}

/// Stand-in deep-model outputs: each target (HCC label, then the three
/// LI-RADS flags) is flipped with probability `flip`, and the probability is
/// drawn uniformly from the half of [0, 1] the flipped target points to.
/// Cases without flags use the label for all four.
pub fn stub_probs(
    cases: &[(String, u8, Option<LiradsFlags>)],
    flip: f64,
    seed: u64,
) -> Result<BTreeMap<String, DeepProbs>> {
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::InvalidArgument(format!("flip probability must be in [0, 1], got {flip}")));
    }
    let mut out = BTreeMap::new();
    for (i, (id, label, flags)) in cases.iter().enumerate() {
        let mut rng = case_rng(seed, i);
        let f = flags.unwrap_or(LiradsFlags {
            aphe: *label,
            ec: *label,
            npw: *label,
        });
        let mut draw = |target: u8| {
            let noisy = (target == 1) != (rng.random::<f64>() < flip);
            let u: f64 = rng.random_range(0.0..0.5);
            if noisy {
                0.5 + u
            } else {
                u
            }
        };
        let probs = DeepProbs {
            p_hcc: draw(*label),
            p_aphe: draw(f.aphe),
            p_ec: draw(f.ec),
            p_npw: draw(f.npw),
        };
        if out.insert(id.clone(), probs).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate lesion_id {id}")));
        }
    }
    Ok(out)
}

/// One independently seeded stub per fold.
pub fn stub_fold_probs(
    cases: &[(String, u8, Option<LiradsFlags>)],
    k: usize,
    flip: f64,
    seed: u64,
) -> Result<Vec<BTreeMap<String, DeepProbs>>> {
    (0..k)
        .map(|j| stub_probs(cases, flip, seed.wrapping_add(j as u64 + 1)))
        .collect()
}

/// Writes `probs_fold{j}.csv` for every fold into `dir`.
pub fn write_fold_probs(folds: &[BTreeMap<String, DeepProbs>], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    folds
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let p = fold_probs_path(dir, j);
            write_deep_probs(m, &p)?;
            Ok(p)
        })
        .collect()
}
