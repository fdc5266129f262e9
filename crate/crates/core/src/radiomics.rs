//! Handcrafted LI-RADS contrast features and lesion size.
//!
//! * `f_aphe`: lesion minus parenchyma median on the arterial phase.
//! * `f_npw`: the same on the portal venous phase.
//! * `f_ec`: energy of the lesion interior minus energy of its border ring,
//!   on the arterial phase.
//!
//! "Energy" here is the *mean* of squared HU over a region, not the sum, so
//! the ring/interior contrast does not scale with how many voxels each holds.
//! All features are computed on full preprocessed volumes, never on patches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{dilate_in_plane, erode_in_plane};
use crate::volume::{region_values, Mask3D, PhaseSet, Volume3D};

/// Border ring thickness, in voxels, used for `f_ec`.
pub const BORDER_THICKNESS: usize = 1;

/// Lesion dilation, in voxels, removed from the liver to form the parenchyma.
pub const PARENCHYMA_MARGIN: usize = 2;

fn nonempty_values(volume: &Volume3D, mask: &Mask3D, what: &str) -> Result<Vec<f64>> {
    let values = region_values(volume, mask)?;
    if values.is_empty() {
        return Err(Error::EmptyRegion(what.to_string()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(values)
}

/// Median of a non-empty sample; even counts average the two middle values.
pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn median_hu(volume: &Volume3D, mask: &Mask3D) -> Result<f64> {
    nonempty_values(volume, mask, "median region").map(median)
}

/// Mean squared intensity over the mask, in HU².
pub fn energy_hu(volume: &Volume3D, mask: &Mask3D) -> Result<f64> {
    let values = nonempty_values(volume, mask, "energy region")?;
    Ok(values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64)
}

fn mean_hu(volume: &Volume3D, mask: &Mask3D) -> Result<f64> {
    let values = nonempty_values(volume, mask, "mean region")?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Splits the lesion into an interior and a border ring by slice-wise erosion.
///
/// Returns `(inner, border)` with `inner ∪ border = lesion` and
/// `inner ∩ border = ∅`. Slices that erode away entirely end up in the border.
pub fn lesion_border(lesion: &Mask3D, thickness: usize) -> Result<(Mask3D, Mask3D)> {
    if lesion.is_empty_region() {
        return Err(Error::EmptyRegion("lesion mask".into()));
    }
    let inner = erode_in_plane(lesion, thickness);
    let border = lesion.difference(&inner)?;
    Ok((inner, border))
}

/// Liver minus the lesion dilated by `margin` voxels, minus any other lesions.
pub fn parenchyma_mask(
    liver: &Mask3D,
    lesion: &Mask3D,
    margin: usize,
    other_lesions: Option<&Mask3D>,
) -> Result<Mask3D> {
    if liver.is_empty_region() {
        return Err(Error::EmptyRegion("liver mask".into()));
    }
    let mut excluded = dilate_in_plane(lesion, margin);
    if let Some(other) = other_lesions {
        excluded = excluded.union(other)?;
    }
    let parenchyma = liver.difference(&excluded)?;
    if parenchyma.is_empty_region() {
        return Err(Error::EmptyRegion(
            "parenchyma (lesion covers the whole liver)".into(),
        ));
    }
    Ok(parenchyma)
}

pub fn f_aphe(arterial: &Volume3D, lesion: &Mask3D, parenchyma: &Mask3D) -> Result<f64> {
    Ok(median_hu(arterial, lesion)? - median_hu(arterial, parenchyma)?)
}

pub fn f_npw(portal: &Volume3D, lesion: &Mask3D, parenchyma: &Mask3D) -> Result<f64> {
    Ok(median_hu(portal, lesion)? - median_hu(portal, parenchyma)?)
}

/// Interior-minus-border energy contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyContrast {
    pub value: f64,
    /// The lesion has no interior after erosion; `value` is 0.
    pub degenerate: bool,
}

pub fn f_ec(arterial: &Volume3D, lesion: &Mask3D) -> Result<EnergyContrast> {
    let (inner, border) = lesion_border(lesion, BORDER_THICKNESS)?;
    if inner.is_empty_region() {
        return Ok(EnergyContrast {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(EnergyContrast {
        value: energy_hu(arterial, &inner)? - energy_hu(arterial, &border)?,
        degenerate: false,
    })
}

/// `mean(inner) - mean(border)` of the same split `f_ec` uses.
pub fn border_mean_contrast(arterial: &Volume3D, lesion: &Mask3D) -> Result<f64> {
    let (inner, border) = lesion_border(lesion, BORDER_THICKNESS)?;
    Ok(mean_hu(arterial, &inner)? - mean_hu(arterial, &border)?)
}

fn boundary_points(mask: &Mask3D, z: usize) -> Vec<(usize, usize)> {
    let [nx, ny, _] = mask.dims();
    let mut pts = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !mask.is_set_at(x, y, z) {
                continue;
            }
            let interior = x > 0
                && y > 0
                && x + 1 < nx
                && y + 1 < ny
                && mask.is_set_at(x - 1, y, z)
                && mask.is_set_at(x + 1, y, z)
                && mask.is_set_at(x, y - 1, z)
                && mask.is_set_at(x, y + 1, z);
            if !interior {
                pts.push((x, y));
            }
        }
    }
    pts
}

/// Maximum in-plane Feret diameter (mm) on the axial slice with the largest
/// lesion area; the lowest such slice wins ties. A single-voxel slice
/// measures one in-plane voxel diagonal.
pub fn lesion_diameter(lesion: &Mask3D) -> Result<f64> {
    let nz = lesion.dims()[2];
    let (best_z, best_area) = (0..nz)
        .map(|z| (z, lesion.count_in_slice(z)))
        .fold((0, 0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    if best_area == 0 {
        return Err(Error::EmptyRegion("lesion mask".into()));
    }
    let s = lesion.spacing();
    if best_area == 1 {
        return Ok(s.in_plane_diagonal());
    }
    // The farthest pair of a pixel set always lies on its boundary.
    let pts = boundary_points(lesion, best_z);
    let mut best = 0.0f64;
    for (i, &(x1, y1)) in pts.iter().enumerate() {
        for &(x2, y2) in &pts[i + 1..] {
            let dx = (x1 as f64 - x2 as f64) * s.dx;
            let dy = (y1 as f64 - y2 as f64) * s.dy;
            best = best.max(dx * dx + dy * dy);
        }
    }
    Ok(best.sqrt())
}

/// The three contrast features plus lesion size for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedFeatures {
    pub lesion_id: String,
    pub f_aphe: f64,
    pub f_ec: f64,
    pub f_npw: f64,
    pub size_mm: f64,
}

impl HandcraftedFeatures {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_aphe", self.f_aphe),
            ("f_ec", self.f_ec),
            ("f_npw", self.f_npw),
            ("size_mm", self.size_mm),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} of lesion {}", self.lesion_id)));
            }
        }
        Ok(())
    }
}

/// Computes all handcrafted features for a preprocessed case.
pub fn compute_features(case: &PhaseSet) -> Result<HandcraftedFeatures> {
    case.validate_common_grid()?;
    if case.lesion_mask.is_empty_region() {
        return Err(Error::EmptyRegion(format!("lesion {}: lesion mask", case.lesion_id)));
    }
    let parenchyma = parenchyma_mask(
        &case.liver_mask,
        &case.lesion_mask,
        PARENCHYMA_MARGIN,
        case.other_lesions.as_ref(),
    )?;
    let ec = f_ec(&case.arterial, &case.lesion_mask)?;
    if ec.degenerate {
        log::warn!(
            "event=degenerate_border lesion_id={} reason=\"lesion has no interior after erosion; f_ec set to 0\"",
            case.lesion_id
        );
    }
    let features = HandcraftedFeatures {
        lesion_id: case.lesion_id.clone(),
        f_aphe: f_aphe(&case.arterial, &case.lesion_mask, &parenchyma)?,
        f_ec: ec.value,
        f_npw: f_npw(&case.portal, &case.lesion_mask, &parenchyma)?,
        size_mm: lesion_diameter(&case.lesion_mask)?,
    };
    features.validate()?;
    Ok(features)
}

pub const FEATURES_HEADER: [&str; 5] = ["lesion_id", "f_aphe", "f_ec", "f_npw", "size_mm"];

/// Writes the features CSV. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn write_features_csv(rows: &[HandcraftedFeatures], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = FEATURES_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lesion_id, r.f_aphe, r.f_ec, r.f_npw, r.size_mm
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<HandcraftedFeatures>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    for col in FEATURES_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::csv(path, format!("missing column {col}")));
        }
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in reader.deserialize::<HandcraftedFeatures>() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        rec.validate()?;
        if !seen.insert(rec.lesion_id.clone()) {
            return Err(Error::csv(path, format!("duplicate lesion_id {}", rec.lesion_id)));
        }
        rows.push(rec);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Spacing};
    use proptest::prelude::*;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, Spacing::RESAMPLED, 0.0).unwrap()
    }

    fn line(values: &[f64]) -> (Volume3D, Mask3D) {
        let g = geom([values.len(), 1, 1]);
        (Volume3D::new(g, values.to_vec()).unwrap(), Mask3D::filled(g, 1))
    }

    fn square(n: usize, side: usize) -> Mask3D {
        let lo = (n - side) / 2;
        Mask3D::from_fn(geom([n, n, 1]), |x, y, _| {
            u8::from((lo..lo + side).contains(&x) && (lo..lo + side).contains(&y))
        })
    }

    #[test]
    fn median_odd_even_empty() {
        let (v, m) = line(&[90.0, 80.0, 100.0]);
        assert_eq!(median_hu(&v, &m).unwrap(), 90.0);
        let (v, m) = line(&[40.0, 10.0, 30.0, 20.0]);
        assert_eq!(median_hu(&v, &m).unwrap(), 25.0);
        let empty = Mask3D::filled(*v.geometry(), 0);
        assert!(matches!(median_hu(&v, &empty), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn energy_examples() {
        let (v, m) = line(&[3.0, 4.0]);
        assert_eq!(energy_hu(&v, &m).unwrap(), 12.5);
        let (v, m) = line(&[0.0; 5]);
        assert_eq!(energy_hu(&v, &m).unwrap(), 0.0);
        let (v, m) = line(&[-7.0; 3]);
        assert_eq!(energy_hu(&v, &m).unwrap(), 49.0);
    }

    #[test]
    fn border_of_squares() {
        let (inner, border) = lesion_border(&square(7, 5), 1).unwrap();
        assert_eq!(inner.count(), 9);
        assert_eq!(border.count(), 16);
        assert!(inner.is_set_at(3, 3, 0) && inner.is_set_at(2, 2, 0) && !inner.is_set_at(1, 1, 0));

        let (inner, border) = lesion_border(&square(9, 7), 2).unwrap();
        assert_eq!(inner.count(), 9);
        assert_eq!(border.count(), 40);

        let (inner, border) = lesion_border(&square(3, 1), 1).unwrap();
        assert_eq!(inner.count(), 0);
        assert_eq!(border.count(), 1);

        assert!(lesion_border(&square(3, 0), 1).is_err());
    }

    #[test]
    fn parenchyma_rules() {
        let g = geom([11, 11, 1]);
        let liver = Mask3D::filled(g, 1);
        let lesion = square(11, 1);
        let p = parenchyma_mask(&liver, &lesion, 2, None).unwrap();
        assert_eq!(p.count(), 121 - 13);
        let p0 = parenchyma_mask(&liver, &lesion, 0, None).unwrap();
        assert_eq!(p0, liver.difference(&lesion).unwrap());
        assert!(matches!(
            parenchyma_mask(&liver, &liver, 0, None),
            Err(Error::EmptyRegion(_))
        ));
        let other = square(11, 11).difference(&square(11, 9)).unwrap();
        let p2 = parenchyma_mask(&liver, &lesion, 0, Some(&other)).unwrap();
        assert_eq!(p2.count(), 81 - 1);
    }

    fn two_region_volume(lesion_hu: f64, parenchyma_hu: f64) -> (Volume3D, Mask3D, Mask3D) {
        let g = geom([10, 1, 1]);
        let lesion = Mask3D::from_fn(g, |x, _, _| u8::from(x < 3));
        let par = Mask3D::from_fn(g, |x, _, _| u8::from(x >= 5));
        let v = Volume3D::from_fn(g, |x, _, _| if x < 3 { lesion_hu } else { parenchyma_hu });
        (v, lesion, par)
    }

    #[test]
    fn aphe_and_npw_arithmetic() {
        let (v, l, p) = two_region_volume(110.0, 90.0);
        assert_eq!(f_aphe(&v, &l, &p).unwrap(), 20.0);
        assert_eq!(f_aphe(&v, &p, &l).unwrap(), -20.0);
        assert_eq!(f_aphe(&v, &l, &l).unwrap(), 0.0);

        let (v, l, p) = two_region_volume(80.0, 110.0);
        assert_eq!(f_npw(&v, &l, &p).unwrap(), -30.0);
        assert_eq!(f_npw(&v, &l, &p).unwrap(), f_aphe(&v, &l, &p).unwrap());
    }

    #[test]
    fn ec_ring_and_degenerate() {
        let lesion = square(7, 5);
        let (inner, _) = lesion_border(&lesion, 1).unwrap();
        let v = Volume3D::from_fn(*lesion.geometry(), |x, y, z| {
            if inner.is_set_at(x, y, z) {
                50.0
            } else {
                200.0
            }
        });
        let ec = f_ec(&v, &lesion).unwrap();
        assert_eq!(ec.value, -37500.0);
        assert!(!ec.degenerate);

        let uniform = Volume3D::filled(*lesion.geometry(), 77.0);
        assert_eq!(f_ec(&uniform, &lesion).unwrap().value, 0.0);

        let dot = square(3, 1);
        let ec = f_ec(&Volume3D::filled(*dot.geometry(), 5.0), &dot).unwrap();
        assert_eq!(ec, EnergyContrast { value: 0.0, degenerate: true });
    }

    fn disk(n: usize, radius: f64) -> Mask3D {
        let c = (n / 2) as f64;
        Mask3D::from_fn(geom([n, n, 1]), |x, y, _| {
            u8::from((x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= radius * radius)
        })
    }

    #[test]
    fn diameter_examples() {
        let d = lesion_diameter(&disk(31, 10.0)).unwrap();
        let diag = Spacing::RESAMPLED.in_plane_diagonal();
        assert!((d - 15.2).abs() <= diag, "{d}");

        assert!((lesion_diameter(&square(3, 1)).unwrap() - 0.76f64.hypot(0.76)).abs() < 1e-12);
        assert!((lesion_diameter(&square(3, 1)).unwrap() - 1.0748).abs() < 1e-3);

        for k in 2..9 {
            let m = Mask3D::from_fn(geom([10, 3, 1]), |x, y, _| u8::from(y == 1 && x < k));
            assert!((lesion_diameter(&m).unwrap() - (k - 1) as f64 * 0.76).abs() < 1e-12);
        }
        assert!(lesion_diameter(&square(3, 0)).is_err());
    }

    #[test]
    fn diameter_uses_largest_slice() {
        let g = geom([20, 20, 2]);
        // slice 0: 10-voxel line (area 10); slice 1: 4x4 block (area 16)
        let m = Mask3D::from_fn(g, |x, y, z| {
            u8::from(if z == 0 { y == 0 && x < 10 } else { x < 4 && y < 4 })
        });
        let expect = (3.0f64 * 0.76).hypot(3.0 * 0.76);
        assert!((lesion_diameter(&m).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn features_csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            HandcraftedFeatures {
                lesion_id: "L1".into(),
                f_aphe: 40.0,
                f_ec: -0.1 - 0.2,
                f_npw: -30.5,
                size_mm: 1.0 / 3.0,
            },
            HandcraftedFeatures {
                lesion_id: "L2".into(),
                f_aphe: 1e-9,
                f_ec: 12345.678,
                f_npw: 0.0,
                size_mm: 20.0,
            },
        ];
        let p = dir.path().join("f.csv");
        write_features_csv(&rows, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("lesion_id,f_aphe,f_ec,f_npw,size_mm\n"));
        assert_eq!(read_features_csv(&p).unwrap(), rows);

        fs::write(&p, "lesion_id,f_aphe,f_ec,f_npw,size_mm\nA,1,2,3,4\nA,1,2,3,4\n").unwrap();
        assert!(read_features_csv(&p).is_err());
        fs::write(&p, "lesion_id,f_aphe,f_ec,size_mm\nA,1,2,4\n").unwrap();
        assert!(read_features_csv(&p).is_err());
    }

    fn blob(g: Geometry, centers: &[(f64, f64, f64, f64)]) -> Mask3D {
        Mask3D::from_fn(g, |x, y, z| {
            u8::from(centers.iter().any(|&(cx, cy, cz, r)| {
                let (dx, dy, dz) = (x as f64 - cx, y as f64 - cy, (z as f64 - cz) * 2.6);
                dx * dx + dy * dy + dz * dz <= r * r
            }))
        })
    }

    fn blob_strategy() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
        proptest::collection::vec((4.0f64..12.0, 4.0f64..12.0, 1.0f64..4.0, 1.0f64..5.0), 1..4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn border_partitions_lesion(centers in blob_strategy()) {
            let m = blob(geom([16, 16, 5]), &centers);
            prop_assume!(!m.is_empty_region());
            let (inner, border) = lesion_border(&m, 1).unwrap();
            prop_assert_eq!(inner.union(&border).unwrap(), m.binarized());
            prop_assert!(inner.data().iter().zip(border.data()).all(|(&a, &b)| !(a >= 1 && b >= 1)));
        }

        #[test]
        fn aphe_antisymmetric_and_shift_invariant(
            seed in any::<u32>(),
            shift in -300.0f64..300.0,
        ) {
            let g = geom([12, 12, 2]);
            let v = Volume3D::from_fn(g, |x, y, z| ((x * 7 + y * 13 + z * 29 + seed as usize) % 101) as f64);
            let a = Mask3D::from_fn(g, |x, _, _| u8::from(x < 5));
            let b = Mask3D::from_fn(g, |x, _, _| u8::from(x > 6));
            let fa = f_aphe(&v, &a, &b).unwrap();
            prop_assert_eq!(fa, -f_aphe(&v, &b, &a).unwrap());
            prop_assert_eq!(f_npw(&v, &a, &b).unwrap(), -f_npw(&v, &b, &a).unwrap());
            let shifted = v.map(|x| x + shift.round());
            prop_assert!((f_aphe(&shifted, &a, &b).unwrap() - fa).abs() < 1e-9);
        }

        #[test]
        fn ec_shift_covariance(
            centers in blob_strategy(),
            seed in any::<u32>(),
            c in -200.0f64..200.0,
        ) {
            let m = blob(geom([16, 16, 5]), &centers);
            let (inner, _) = lesion_border(&m, 1).unwrap_or((m.clone(), m.clone()));
            prop_assume!(!inner.is_empty_region());
            let v = Volume3D::from_fn(*m.geometry(), |x, y, z| ((x * 31 + y * 17 + z * 5 + seed as usize) % 211) as f64 - 100.0);
            let base = f_ec(&v, &m).unwrap().value;
            let moved = f_ec(&v.map(|x| x + c), &m).unwrap().value;
            let expected = 2.0 * c * border_mean_contrast(&v, &m).unwrap();
            prop_assert!(((moved - base) - expected).abs() <= 1e-7 * (1.0 + base.abs() + moved.abs()));
        }

        #[test]
        fn diameter_monotone_under_dilation(centers in blob_strategy()) {
            let m = blob(geom([24, 24, 5]), &centers.iter().map(|&(x, y, z, r)| (x + 4.0, y + 4.0, z, r)).collect::<Vec<_>>());
            prop_assume!(!m.is_empty_region());
            let d0 = lesion_diameter(&m).unwrap();
            let d1 = lesion_diameter(&dilate_in_plane(&m, 1)).unwrap();
            prop_assert!(d1 >= d0, "{} < {}", d1, d0);
        }

        #[test]
        fn features_deterministic(seed in any::<u32>()) {
            let g = geom([12, 12, 3]);
            let v = Volume3D::from_fn(g, |x, y, z| ((x * 3 + y * 11 + z + seed as usize) % 53) as f64);
            let m = Mask3D::from_fn(g, |x, y, _| u8::from((3..9).contains(&x) && (2..8).contains(&y)));
            let a = f_ec(&v, &m).unwrap().value;
            let b = f_ec(&v, &m).unwrap().value;
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
