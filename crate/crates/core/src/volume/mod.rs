//! Scalar 3D volumes and binary masks on a shared voxel grid.
//!
//! Data is stored x-fastest, then y, then z. Intensities live in memory as
//! `f64` Hounsfield units; masks keep their raw `u8` labels so multi-label
//! exports round-trip, and any label `>= 1` counts as foreground.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Millimeters per voxel along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    /// Target grid every case is resampled to.
    pub const RESAMPLED: Spacing = Spacing {
        dx: 0.76,
        dy: 0.76,
        dz: 2.00,
    };

    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let s = Spacing { dx, dy, dz };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "spacing {axis} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    /// In-plane voxel diagonal in millimeters.
    pub fn in_plane_diagonal(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Voxel grid layout: counts, spacing and the z-origin used for registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub origin_z: f64,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: Spacing, origin_z: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must all be >= 1, got {dims:?}"
            )));
        }
        spacing.validate()?;
        if !origin_z.is_finite() {
            return Err(Error::NonFinite("origin_z".into()));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin_z,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / self.slice_len();
        [x, y, z]
    }

    /// Physical z coordinate of the center of slice `k`.
    pub fn slice_z(&self, k: f64) -> f64 {
        self.origin_z + k * self.spacing.dz
    }

    /// Dims and spacing agree. The z-origin is bookkeeping and is not compared.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// A dense 3D array of voxels on a [`Geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

/// CT intensities in Hounsfield units.
pub type Volume3D = Grid<f64>;

/// Binary labels; any value `>= 1` is foreground.
pub type Mask3D = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::DataLength {
                expected: geometry.len(),
                found: data.len(),
            });
        }
        Ok(Grid { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        Grid {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.geometry.spacing
    }

    pub fn origin_z(&self) -> f64 {
        self.geometry.origin_z
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
    }

    /// Borrow axial slice `z` as an x-fastest 2D slab.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.geometry.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn with_origin_z(mut self, origin_z: f64) -> Self {
        self.geometry.origin_z = origin_z;
        self
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask3D {
    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.data[index] >= 1
    }

    #[inline]
    pub fn is_set_at(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) >= 1
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 1).count()
    }

    pub fn is_empty_region(&self) -> bool {
        !self.data.iter().any(|&v| v >= 1)
    }

    /// Linear indices of foreground voxels in storage order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 1)
            .map(|(i, _)| i)
    }

    /// Collapse labels to {0, 1}.
    pub fn binarized(&self) -> Mask3D {
        self.map(|v| u8::from(v >= 1))
    }

    pub fn count_in_slice(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&v| v >= 1).count()
    }

    /// Foreground of `self` minus foreground of `other`, as {0, 1}.
    pub fn difference(&self, other: &Mask3D) -> Result<Mask3D> {
        self.geometry
            .ensure_same_grid(&other.geometry, "mask difference")?;
        Ok(Grid {
            geometry: self.geometry,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(a >= 1 && b == 0))
                .collect(),
        })
    }

    pub fn union(&self, other: &Mask3D) -> Result<Mask3D> {
        self.geometry.ensure_same_grid(&other.geometry, "mask union")?;
        Ok(Grid {
            geometry: self.geometry,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(a >= 1 || b >= 1))
                .collect(),
        })
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask3D) -> Result<bool> {
        self.geometry.ensure_same_grid(&other.geometry, "mask subset")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| a == 0 || b >= 1))
    }

    /// Mean voxel index of the foreground, or `None` for an empty mask.
    pub fn centroid_index(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for i in self.indices() {
            let c = self.geometry.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        Some(sum.map(|s| s / n as f64))
    }
}

/// Intensities of `volume` at every voxel where `mask` is set, in storage order.
///
/// An empty mask yields an empty vector; callers decide whether that is an error.
pub fn region_values(volume: &Volume3D, mask: &Mask3D) -> Result<Vec<f64>> {
    volume
        .geometry()
        .ensure_same_grid(mask.geometry(), "region_values")?;
    Ok(volume
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m >= 1)
        .map(|(&v, _)| v)
        .collect())
}

/// Presence flags for the three LI-RADS major features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiradsFlags {
    pub aphe: u8,
    pub ec: u8,
    pub npw: u8,
}

/// One lesion case: co-registered contrast phases plus liver and lesion masks.
#[derive(Debug, Clone)]
pub struct PhaseSet {
    pub lesion_id: String,
    pub arterial: Volume3D,
    pub portal: Volume3D,
    pub delayed: Option<Volume3D>,
    pub liver_mask: Mask3D,
    pub lesion_mask: Mask3D,
    /// Other lesions of the same patient, excluded from the parenchyma.
    pub other_lesions: Option<Mask3D>,
    pub label: Option<u8>,
    pub lirads: Option<LiradsFlags>,
}

impl PhaseSet {
    /// Checks that all members share the portal grid. A lesion that leaks
    /// outside the liver is only logged.
    pub fn validate_common_grid(&self) -> Result<()> {
        let g = self.portal.geometry();
        g.ensure_same_grid(self.arterial.geometry(), "arterial vs portal")?;
        if let Some(d) = &self.delayed {
            g.ensure_same_grid(d.geometry(), "delayed vs portal")?;
        }
        g.ensure_same_grid(self.liver_mask.geometry(), "liver mask vs portal")?;
        g.ensure_same_grid(self.lesion_mask.geometry(), "lesion mask vs portal")?;
        if let Some(o) = &self.other_lesions {
            g.ensure_same_grid(o.geometry(), "other lesions vs portal")?;
        }
        if !self.lesion_mask.is_subset_of(&self.liver_mask)? {
            log::warn!(
                "event=lesion_outside_liver lesion_id={} reason=\"lesion mask is not contained in liver mask\"",
                self.lesion_id
            );
        }
        Ok(())
    }
}
