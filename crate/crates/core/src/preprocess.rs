//! Phase registration, nearest-neighbour resampling and lesion-centred
//! patch extraction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::io::write_channels;
use crate::volume::{Geometry, Grid, LiradsFlags, Mask3D, PhaseSet, Spacing, Volume3D};

/// Fill value for slices shifted in from outside the scan (air).
pub const AIR_HU: f64 = -1024.0;

/// Patch size in voxels (x, y, z).
pub const PATCH_DIMS: [usize; 3] = [96, 96, 24];

/// Minimum fraction of the lesion a patch must contain before it is flagged.
pub const MIN_COVERAGE: f64 = 0.95;

/// Z-translation, in slices of the moving image, that aligns the liver
/// z-centroid of `moving` onto that of `fixed`.
pub fn register_z(moving_liver: &Mask3D, fixed_liver: &Mask3D) -> Result<i64> {
    let moving = moving_liver
        .centroid_index()
        .ok_or_else(|| Error::EmptyRegion("moving liver mask".into()))?;
    let fixed = fixed_liver
        .centroid_index()
        .ok_or_else(|| Error::EmptyRegion("fixed liver mask".into()))?;
    let mg = moving_liver.geometry();
    let fg = fixed_liver.geometry();
    let delta_mm = fg.slice_z(fixed[2]) - mg.slice_z(moving[2]);
    Ok((delta_mm / mg.spacing.dz).round() as i64)
}

/// Output slice `k` takes input slice `k - shift`; slices with no source get `fill`.
pub fn apply_z_shift<T: Copy>(grid: &Grid<T>, shift: i64, fill: T) -> Result<Grid<T>> {
    let nz = grid.dims()[2] as i64;
    if shift.abs() >= nz {
        return Err(Error::InvalidArgument(format!(
            "z-shift {shift} out of range for {nz} slices"
        )));
    }
    let n = grid.geometry().slice_len();
    let mut out = Grid::filled(*grid.geometry(), fill);
    for k in 0..nz {
        let src = k - shift;
        if (0..nz).contains(&src) {
            let (k, src) = (k as usize, src as usize);
            out.data_mut()[k * n..(k + 1) * n].copy_from_slice(grid.slice(src));
        }
    }
    Ok(out)
}

/// Geometry with `spacing` covering the same physical extent as `source`.
pub fn target_geometry(source: &Geometry, spacing: Spacing) -> Result<Geometry> {
    let src = source.spacing.as_array();
    let dst = spacing.as_array();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((source.dims[a] as f64 * src[a] / dst[a]).round() as usize).max(1);
    }
    Geometry::new(dims, spacing, source.origin_z)
}

/// Nearest source index for each target index along one axis. Voxel centres
/// sit at `origin + i * spacing`; exact ties go to the lower index.
fn nearest_indices(n_src: usize, d_src: f64, o_src: f64, n_dst: usize, d_dst: f64, o_dst: f64) -> Vec<usize> {
    (0..n_dst)
        .map(|j| {
            let u = (o_dst + j as f64 * d_dst - o_src) / d_src;
            let i = (u - 0.5).ceil();
            i.clamp(0.0, (n_src - 1) as f64) as usize
        })
        .collect()
}

/// Nearest-neighbour resampling onto `target`. In-plane origins are zero for
/// every grid; the z origin comes from each geometry.
pub fn resample_nn<T: Copy>(grid: &Grid<T>, target: &Geometry) -> Result<Grid<T>> {
    let target = Geometry::new(target.dims, target.spacing, target.origin_z)?;
    let src = grid.geometry();
    let ix = nearest_indices(src.dims[0], src.spacing.dx, 0.0, target.dims[0], target.spacing.dx, 0.0);
    let iy = nearest_indices(src.dims[1], src.spacing.dy, 0.0, target.dims[1], target.spacing.dy, 0.0);
    let iz = nearest_indices(
        src.dims[2],
        src.spacing.dz,
        src.origin_z,
        target.dims[2],
        target.spacing.dz,
        target.origin_z,
    );
    Ok(Grid::from_fn(target, |x, y, z| grid.get(ix[x], iy[y], iz[z])))
}

fn shift_and_align(
    volume: Volume3D,
    phase_liver: Option<&Mask3D>,
    portal_liver: &Mask3D,
    portal: &Geometry,
) -> Result<(Volume3D, i64)> {
    let (shifted, shift) = match phase_liver {
        Some(liver) => {
            liver
                .geometry()
                .ensure_same_grid(volume.geometry(), "phase liver mask vs phase volume")?;
            let shift = register_z(liver, portal_liver)?;
            (apply_z_shift(&volume, shift, AIR_HU)?, shift)
        }
        None => (volume, 0),
    };
    let aligned = if shifted.geometry() == portal {
        shifted
    } else {
        resample_nn(&shifted, portal)?
    };
    Ok((aligned, shift))
}

/// Registration shifts applied to one case, in slices of each moving image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AppliedShifts {
    pub arterial: i64,
    pub delayed: i64,
}

/// Registers arterial and delayed phases onto the portal venous scan, then
/// resamples every member to `spacing` over the portal field of view.
///
/// Liver and lesion masks are taken to be delineated on the portal phase.
/// `arterial_liver` / `delayed_liver` drive the z-registration; without them
/// the phase is only resampled.
pub fn preprocess_case(
    case: PhaseSet,
    arterial_liver: Option<&Mask3D>,
    delayed_liver: Option<&Mask3D>,
    spacing: Spacing,
) -> Result<(PhaseSet, AppliedShifts)> {
    let portal_geom = *case.portal.geometry();
    let on_portal = |m: Mask3D| -> Result<Mask3D> {
        if m.geometry() == &portal_geom {
            Ok(m)
        } else {
            resample_nn(&m, &portal_geom)
        }
    };
    let liver = on_portal(case.liver_mask)?;
    let lesion = on_portal(case.lesion_mask)?;
    let other = case.other_lesions.map(on_portal).transpose()?;

    let (arterial, a_shift) = shift_and_align(case.arterial, arterial_liver, &liver, &portal_geom)?;
    let (delayed, d_shift) = match case.delayed {
        Some(d) => {
            let (v, s) = shift_and_align(d, delayed_liver, &liver, &portal_geom)?;
            (Some(v), s)
        }
        None => (None, 0),
    };

    let target = target_geometry(&portal_geom, spacing)?;
    let same = target == portal_geom;
    let rs_v = |v: &Volume3D| if same { Ok(v.clone()) } else { resample_nn(v, &target) };
    let rs_m = |m: &Mask3D| if same { Ok(m.clone()) } else { resample_nn(m, &target) };

    let out = PhaseSet {
        lesion_id: case.lesion_id,
        arterial: rs_v(&arterial)?,
        portal: rs_v(&case.portal)?,
        delayed: delayed.as_ref().map(rs_v).transpose()?,
        liver_mask: rs_m(&liver)?,
        lesion_mask: rs_m(&lesion)?,
        other_lesions: other.as_ref().map(rs_m).transpose()?,
        label: case.label,
        lirads: case.lirads,
    };
    out.validate_common_grid()?;
    Ok((
        out,
        AppliedShifts {
            arterial: a_shift,
            delayed: d_shift,
        },
    ))
}

/// Which network the patch feeds; decides the channel layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    Hcc,
    Aphe,
    Ec,
    Npw,
}

impl PatchMode {
    pub const ALL: [PatchMode; 4] = [PatchMode::Hcc, PatchMode::Aphe, PatchMode::Ec, PatchMode::Npw];

    pub fn as_str(&self) -> &'static str {
        match self {
            PatchMode::Hcc => "hcc",
            PatchMode::Aphe => "aphe",
            PatchMode::Ec => "ec",
            PatchMode::Npw => "npw",
        }
    }

    /// APHE uses arterial + portal + lesion; the others add the delayed phase.
    pub fn channel_names(&self) -> &'static [&'static str] {
        match self {
            PatchMode::Aphe => &["arterial", "portal", "lesion_mask"],
            _ => &["arterial", "portal", "delayed", "lesion_mask"],
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hcc" => Ok(PatchMode::Hcc),
            "aphe" => Ok(PatchMode::Aphe),
            "ec" => Ok(PatchMode::Ec),
            "npw" => Ok(PatchMode::Npw),
            other => Err(Error::InvalidArgument(format!("unknown patch mode {other:?}"))),
        }
    }
}

/// Multi-channel lesion-centred crop fed to the deep models.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub lesion_id: String,
    pub mode: PatchMode,
    pub dims: [usize; 3],
    pub spacing: Spacing,
    /// Voxel index of the window's first corner in the source grid.
    pub window_start: [usize; 3],
    pub channels: Vec<Vec<f64>>,
    pub channel_names: Vec<String>,
    pub lesion_coverage: f64,
    /// Set when less than [`MIN_COVERAGE`] of the lesion lies inside the window.
    pub coverage_warning: bool,
    pub label: Option<u8>,
    pub lirads: Option<LiradsFlags>,
}

impl Patch {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// Start of a `size`-wide window centred on `center`, clamped into `[0, n - size]`.
fn window_start(center: f64, size: usize, n: usize) -> usize {
    let start = (center - (size as f64 - 1.0) / 2.0).round();
    start.clamp(0.0, (n - size) as f64) as usize
}

/// Crops a [`PATCH_DIMS`] window centred on the lesion centroid.
///
/// The window is clamped to stay inside the volume, never padded. Patches
/// covering less than [`MIN_COVERAGE`] of the lesion are returned with
/// `coverage_warning` set.
pub fn extract_patch(case: &PhaseSet, mode: PatchMode) -> Result<Patch> {
    case.validate_common_grid()?;
    let g = *case.portal.geometry();
    for a in 0..3 {
        if g.dims[a] < PATCH_DIMS[a] {
            return Err(Error::InvalidArgument(format!(
                "lesion {}: volume dims {:?} smaller than patch {:?}",
                case.lesion_id, g.dims, PATCH_DIMS
            )));
        }
    }
    let delayed = match (mode, &case.delayed) {
        (PatchMode::Aphe, _) => None,
        (_, Some(d)) => Some(d),
        (_, None) => {
            return Err(Error::Missing(format!(
                "lesion {}: delayed phase required for {mode} patches",
                case.lesion_id
            )))
        }
    };
    let centroid = case
        .lesion_mask
        .centroid_index()
        .ok_or_else(|| Error::EmptyRegion(format!("lesion {}: lesion mask", case.lesion_id)))?;
    let start: [usize; 3] = std::array::from_fn(|a| window_start(centroid[a], PATCH_DIMS[a], g.dims[a]));

    let crop = |grid: &Volume3D| -> Vec<f64> {
        let mut out = Vec::with_capacity(PATCH_DIMS.iter().product());
        for z in start[2]..start[2] + PATCH_DIMS[2] {
            for y in start[1]..start[1] + PATCH_DIMS[1] {
                let row = g.index(start[0], y, z);
                out.extend_from_slice(&grid.data()[row..row + PATCH_DIMS[0]]);
            }
        }
        out
    };
    let lesion = case.lesion_mask.map(|v| f64::from(u8::from(v >= 1)));

    let mut channels = vec![crop(&case.arterial), crop(&case.portal)];
    if let Some(d) = delayed {
        channels.push(crop(d));
    }
    let lesion_crop = crop(&lesion);
    let inside = lesion_crop.iter().filter(|&&v| v > 0.0).count();
    channels.push(lesion_crop);

    let total = case.lesion_mask.count();
    let coverage = inside as f64 / total as f64;
    let coverage_warning = coverage < MIN_COVERAGE;
    if coverage_warning {
        log::warn!(
            "event=low_coverage lesion_id={} mode={mode} coverage={coverage:.4}",
            case.lesion_id
        );
    }

    Ok(Patch {
        lesion_id: case.lesion_id.clone(),
        mode,
        dims: PATCH_DIMS,
        spacing: g.spacing,
        window_start: start,
        channels,
        channel_names: mode.channel_names().iter().map(|s| s.to_string()).collect(),
        lesion_coverage: coverage,
        coverage_warning,
        label: case.label,
        lirads: case.lirads,
    })
}

/// JSON sidecar written next to each exported patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub lesion_id: String,
    pub mode: PatchMode,
    pub coverage: f64,
    pub coverage_warning: bool,
    pub label: Option<u8>,
    pub lirads: Option<LiradsFlags>,
    pub channels: Vec<String>,
    pub window_start: [usize; 3],
}

/// Writes `<lesion_id>_<mode>.hdr/.raw` (4D, channel axis last) and a `.json` sidecar.
/// Returns the header path.
pub fn write_patch(patch: &Patch, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let stem = format!("{}_{}", patch.lesion_id, patch.mode);
    let hdr = write_channels(&patch.channels, patch.dims, patch.spacing, 0.0, dir.join(&stem))?;
    let sidecar = PatchSidecar {
        lesion_id: patch.lesion_id.clone(),
        mode: patch.mode,
        coverage: patch.lesion_coverage,
        coverage_warning: patch.coverage_warning,
        label: patch.label,
        lirads: patch.lirads,
        channels: patch.channel_names.clone(),
        window_start: patch.window_start,
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(hdr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::io::read_channels;
    use proptest::prelude::*;

    fn unit_geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, Spacing::new(1.0, 1.0, 1.0).unwrap(), 0.0).unwrap()
    }

    fn box_mask(g: Geometry, lo: [usize; 3], hi: [usize; 3]) -> Mask3D {
        Mask3D::from_fn(g, |x, y, z| {
            u8::from((lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z))
        })
    }

    #[test]
    fn register_identical_is_zero() {
        let m = box_mask(unit_geom([6, 6, 12]), [1, 1, 3], [5, 5, 7]);
        assert_eq!(register_z(&m, &m).unwrap(), 0);
    }

    #[test]
    fn register_translated_box() {
        let g = unit_geom([6, 6, 12]);
        let fixed = box_mask(g, [1, 1, 2], [5, 5, 6]);
        let moving = box_mask(g, [1, 1, 5], [5, 5, 9]);
        // centroids 3.5 and 6.5 slices
        assert_eq!(register_z(&moving, &fixed).unwrap(), -3);
        let aligned = apply_z_shift(&moving, -3, 0).unwrap();
        assert_eq!(aligned, fixed);
    }

    #[test]
    fn register_uses_physical_z() {
        let fixed = box_mask(unit_geom([4, 4, 10]), [0, 0, 4], [4, 4, 6]);
        let moving = box_mask(unit_geom([4, 4, 10]), [0, 0, 4], [4, 4, 6]).with_origin_z(-3.0);
        assert_eq!(register_z(&moving, &fixed).unwrap(), 3);
    }

    #[test]
    fn register_empty_fails() {
        let g = unit_geom([4, 4, 4]);
        let empty = Mask3D::filled(g, 0);
        let full = Mask3D::filled(g, 1);
        assert!(matches!(register_z(&empty, &full), Err(Error::EmptyRegion(_))));
        assert!(matches!(register_z(&full, &empty), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn z_shift_rules() {
        let v = Volume3D::from_fn(unit_geom([1, 1, 3]), |_, _, z| z as f64);
        assert_eq!(apply_z_shift(&v, 0, AIR_HU).unwrap(), v);
        assert_eq!(apply_z_shift(&v, 1, AIR_HU).unwrap().data(), &[AIR_HU, 0.0, 1.0]);
        assert_eq!(apply_z_shift(&v, -2, AIR_HU).unwrap().data(), &[2.0, AIR_HU, AIR_HU]);
        assert!(apply_z_shift(&v, 3, AIR_HU).is_err());
        assert!(apply_z_shift(&v, -3, AIR_HU).is_err());
    }

    #[test]
    fn resample_identity() {
        let g = Geometry::new([5, 4, 3], Spacing::RESAMPLED, 7.0).unwrap();
        let v = Volume3D::from_fn(g, |x, y, z| (x + 7 * y + 31 * z) as f64);
        assert_eq!(resample_nn(&v, &g).unwrap(), v);
    }

    #[test]
    fn resample_downsample_values_closed() {
        let g = unit_geom([4, 4, 4]);
        let v = Volume3D::from_fn(g, |x, y, z| (x + 4 * y + 16 * z) as f64);
        let t = Geometry::new([2, 2, 2], Spacing::new(2.0, 2.0, 2.0).unwrap(), 0.0).unwrap();
        let out = resample_nn(&v, &t).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 8.0, 10.0, 32.0, 34.0, 40.0, 42.0]);
        assert!(out.data().iter().all(|x| v.data().contains(x)));
    }

    #[test]
    fn resample_tie_goes_to_lower_index() {
        // target centre 1.5 lies halfway between source centres 1 and 2
        let v = Volume3D::from_fn(unit_geom([4, 1, 1]), |x, _, _| x as f64);
        let t = Geometry::new([1, 1, 1], Spacing::new(1.5, 1.0, 1.0).unwrap(), 0.0).unwrap();
        let t2 = Geometry::new([2, 1, 1], Spacing::new(1.5, 1.0, 1.0).unwrap(), 0.0).unwrap();
        assert_eq!(resample_nn(&v, &t).unwrap().data(), &[0.0]);
        assert_eq!(resample_nn(&v, &t2).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn resample_rejects_degenerate_target() {
        let v = Volume3D::filled(unit_geom([2, 2, 2]), 0.0);
        let bad = Geometry {
            dims: [0, 2, 2],
            spacing: Spacing::RESAMPLED,
            origin_z: 0.0,
        };
        assert!(resample_nn(&v, &bad).is_err());
    }

    #[test]
    fn target_geometry_covers_extent() {
        let src = Geometry::new([512, 512, 40], Spacing::new(0.7, 0.7, 5.0).unwrap(), 0.0).unwrap();
        let t = target_geometry(&src, Spacing::RESAMPLED).unwrap();
        assert_eq!(t.dims, [472, 472, 100]);
    }

    fn sphere_case(dims: [usize; 3], center: [usize; 3], diameter_mm: f64, with_delayed: bool) -> PhaseSet {
        let g = Geometry::new(dims, Spacing::RESAMPLED, 0.0).unwrap();
        let s = Spacing::RESAMPLED;
        let r = diameter_mm / 2.0;
        let lesion = Mask3D::from_fn(g, |x, y, z| {
            let d = [
                (x as f64 - center[0] as f64) * s.dx,
                (y as f64 - center[1] as f64) * s.dy,
                (z as f64 - center[2] as f64) * s.dz,
            ];
            u8::from(d.iter().map(|v| v * v).sum::<f64>() <= r * r)
        });
        let vol = Volume3D::from_fn(g, |x, _, _| x as f64);
        PhaseSet {
            lesion_id: "S".into(),
            arterial: vol.clone(),
            portal: vol.clone(),
            delayed: with_delayed.then(|| vol.clone()),
            liver_mask: Mask3D::filled(g, 1),
            lesion_mask: lesion,
            other_lesions: None,
            label: Some(1),
            lirads: None,
        }
    }

    #[test]
    fn centred_sphere_patch() {
        let case = sphere_case([200, 200, 100], [100, 100, 50], 20.0, true);
        let p = extract_patch(&case, PatchMode::Hcc).unwrap();
        assert_eq!(p.channel_count(), 4);
        assert_eq!(p.lesion_coverage, 1.0);
        assert!(!p.coverage_warning);
        assert!(p.channels.iter().all(|c| c.len() == 96 * 96 * 24));
        assert_eq!(p.channel_names, vec!["arterial", "portal", "delayed", "lesion_mask"]);

        let a = extract_patch(&case, PatchMode::Aphe).unwrap();
        assert_eq!(a.channel_count(), 3);
    }

    #[test]
    fn patch_window_is_clamped() {
        let case = sphere_case([200, 200, 100], [5, 195, 3], 4.0, true);
        let p = extract_patch(&case, PatchMode::Ec).unwrap();
        assert_eq!(p.window_start, [0, 104, 0]);
        assert_eq!(p.channels[0].len(), 96 * 96 * 24);
        assert_eq!(p.lesion_coverage, 1.0);
    }

    #[test]
    fn patch_errors() {
        let case = sphere_case([100, 100, 30], [50, 50, 15], 10.0, false);
        assert!(matches!(extract_patch(&case, PatchMode::Npw), Err(Error::Missing(_))));
        assert!(extract_patch(&case, PatchMode::Aphe).is_ok());

        let mut empty = sphere_case([100, 100, 30], [50, 50, 15], 10.0, true);
        empty.lesion_mask = Mask3D::filled(*empty.portal.geometry(), 0);
        assert!(matches!(extract_patch(&empty, PatchMode::Hcc), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn oversized_lesion_warns() {
        let case = sphere_case([120, 120, 40], [60, 60, 20], 70.0, true);
        let p = extract_patch(&case, PatchMode::Hcc).unwrap();
        assert!(p.lesion_coverage < MIN_COVERAGE);
        assert!(p.coverage_warning);
    }

    #[test]
    fn exported_patch_layout() {
        let dir = tempfile::tempdir().unwrap();
        let case = sphere_case([100, 100, 30], [50, 50, 15], 10.0, true);
        let p = extract_patch(&case, PatchMode::Hcc).unwrap();
        let hdr = write_patch(&p, dir.path()).unwrap();
        let text = fs::read_to_string(&hdr).unwrap();
        assert!(text.contains("NDims=4\n") && text.contains("DimSize=96 96 24 4\n"), "{text}");
        let (_, chans) = read_channels(&hdr).unwrap();
        assert_eq!(chans, p.channels);
        let side: PatchSidecar =
            serde_json::from_str(&fs::read_to_string(dir.path().join("S_hcc.json")).unwrap()).unwrap();
        assert_eq!(side.lesion_id, "S");
        assert_eq!(side.mode, PatchMode::Hcc);
        assert_eq!(side.coverage, 1.0);
    }

    proptest! {
        #[test]
        fn register_inverts_shift(
            nz in 6usize..24,
            k_frac in -0.49f64..0.49,
            lo_frac in 0.0f64..1.0,
            len_frac in 0.0f64..1.0,
        ) {
            let k = (k_frac * nz as f64).trunc() as i64;
            // keep the support where the shift cannot push it off the grid
            let min_z = k.min(0).unsigned_abs() as usize;
            let max_z = nz - k.max(0) as usize;
            let span = max_z - min_z;
            let len = 1 + ((span - 1) as f64 * len_frac) as usize;
            let lo = min_z + ((span - len) as f64 * lo_frac) as usize;
            let g = unit_geom([3, 3, nz]);
            let a = Mask3D::from_fn(g, |x, _, z| u8::from(z >= lo && z < lo + len && x != 1));
            let shifted = apply_z_shift(&a, k, 0).unwrap();
            prop_assert_eq!(register_z(&shifted, &a).unwrap(), -k);
        }

        #[test]
        fn resample_never_invents_values(
            seed in any::<u64>(),
            tdx in 0.3f64..3.0,
            tdz in 0.3f64..3.0,
            nx in 1usize..9,
            nz in 1usize..9,
        ) {
            let g = Geometry::new([5, 4, 6], Spacing::new(0.8, 1.1, 1.7).unwrap(), 1.0).unwrap();
            let v = Volume3D::from_fn(g, |x, y, z| ((x * 31 + y * 17 + z * 7) as u64 ^ seed) as f64 % 97.0);
            let t = Geometry::new([nx, 3, nz], Spacing::new(tdx, 1.0, tdz).unwrap(), -0.5).unwrap();
            let out = resample_nn(&v, &t).unwrap();
            prop_assert!(out.data().iter().all(|x| v.data().contains(x)));
        }

        #[test]
        fn checkerboard_stays_binary(seed in any::<u64>()) {
            let g = unit_geom([8, 8, 8]);
            let m = Mask3D::from_fn(g, |x, y, z| u8::from((x + y + z + seed as usize) % 2 == 0));
            let down = Geometry::new([4, 4, 4], Spacing::new(2.0, 2.0, 2.0).unwrap(), 0.0).unwrap();
            let back = resample_nn(&resample_nn(&m, &down).unwrap(), &g).unwrap();
            prop_assert!(back.data().iter().all(|&v| v <= 1));
        }
    }
}
