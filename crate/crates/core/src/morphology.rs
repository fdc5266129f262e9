//! Slice-wise binary morphology with the 3×3 cross structuring element.
//!
//! Each axial slice is processed independently. Voxels outside the image
//! count as background, so erosion always peels the image border.

use crate::volume::Mask3D;

const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn step(mask: &Mask3D, erode: bool) -> Mask3D {
    let [nx, ny, nz] = mask.dims();
    let mut out = mask.map(|_| 0u8);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let here = mask.is_set_at(x, y, z);
                let neighbour = |dx: isize, dy: isize| {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    xx >= 0
                        && yy >= 0
                        && (xx as usize) < nx
                        && (yy as usize) < ny
                        && mask.is_set_at(xx as usize, yy as usize, z)
                };
                let on = if erode {
                    here && CROSS.iter().all(|&(dx, dy)| neighbour(dx, dy))
                } else {
                    here || CROSS.iter().any(|&(dx, dy)| neighbour(dx, dy))
                };
                if on {
                    out.set(x, y, z, 1);
                }
            }
        }
    }
    out
}

/// In-plane erosion applied `iterations` times. Output labels are {0, 1}.
pub fn erode_in_plane(mask: &Mask3D, iterations: usize) -> Mask3D {
    let mut m = mask.binarized();
    for _ in 0..iterations {
        m = step(&m, true);
    }
    m
}

/// In-plane dilation applied `iterations` times. Output labels are {0, 1}.
pub fn dilate_in_plane(mask: &Mask3D, iterations: usize) -> Mask3D {
    let mut m = mask.binarized();
    for _ in 0..iterations {
        m = step(&m, false);
    }
    m
}
