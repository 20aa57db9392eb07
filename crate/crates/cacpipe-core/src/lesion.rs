//! Lesion extraction: thresholding, connected components, region growing,
//! and size-based candidate filtering.
//!
//! Calcifications are voxels at or above 130 HU grouped into connected
//! components, 26-connected in 3-D and 8-connected within a slice.
//! Components are reported in scan order of their smallest flat voxel index,
//! with voxel lists sorted ascending, so downstream consumers see a stable,
//! platform-independent ordering.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::volgrid::Volume;

/// Minimum HU for a voxel to count as calcified (inclusive).
pub const CALCIUM_THRESHOLD_HU: i16 = 130;
/// Smallest plausible lesion volume in mm^3 (inclusive).
pub const CANDIDATE_MIN_MM3: f64 = 1.5;
/// Largest plausible lesion volume in mm^3 (inclusive); larger components
/// are bone or metal, not coronary calcium.
pub const CANDIDATE_MAX_MM3: f64 = 1500.0;

/// A 3-D connected component of above-threshold voxels.
#[derive(Clone, Debug)]
pub struct Lesion {
    /// Flat voxel indices into the source volume, sorted ascending.
    pub voxels: Vec<usize>,
    /// Maximum HU over the component.
    pub max_hu: i16,
    /// Physical volume: voxel count times in-plane pixel area times slice
    /// increment.
    pub volume_mm3: f64,
}

/// An 8-connected component of above-threshold pixels within one slice.
#[derive(Clone, Debug)]
pub struct SliceLesion {
    /// Flat pixel indices into the slice, sorted ascending.
    pub pixels: Vec<usize>,
    /// Maximum HU over the component.
    pub max_hu: i16,
    /// Physical area: pixel count times pixel area.
    pub area_mm2: f64,
}

/// Marks voxels at or above the threshold.
pub fn threshold_mask(values: &[i16], threshold_hu: i16) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold_hu).collect()
}

/// 26-connected components of a 3-D mask, in scan order of their smallest
/// flat index; each component's indices are sorted ascending.
pub fn components_3d(mask: &[bool], dims: (usize, usize, usize)) -> Vec<Vec<usize>> {
    let (nx, ny, nz) = dims;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match dims");
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.clear();
        queue.push(start);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop() {
            comp.push(idx);
            let z = idx / (nx * ny);
            let rem = idx % (nx * ny);
            let y = rem / nx;
            let x = rem % nx;
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let xx = x as i64 + dx;
                        let yy = y as i64 + dy;
                        let zz = z as i64 + dz;
                        if xx < 0
                            || yy < 0
                            || zz < 0
                            || xx >= nx as i64
                            || yy >= ny as i64
                            || zz >= nz as i64
                        {
                            continue;
                        }
                        let n = (zz as usize * ny + yy as usize) * nx + xx as usize;
                        if mask[n] && !visited[n] {
                            visited[n] = true;
                            queue.push(n);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// 8-connected components of a 2-D mask, in scan order of their smallest
/// flat index; each component's indices are sorted ascending.
pub fn components_2d(mask: &[bool], dims: (usize, usize)) -> Vec<Vec<usize>> {
    let (nx, ny) = dims;
    assert_eq!(mask.len(), nx * ny, "mask length must match dims");
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.clear();
        queue.push(start);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop() {
            comp.push(idx);
            let y = idx / nx;
            let x = idx % nx;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let xx = x as i64 + dx;
                    let yy = y as i64 + dy;
                    if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let n = yy as usize * nx + xx as usize;
                    if mask[n] && !visited[n] {
                        visited[n] = true;
                        queue.push(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

fn lesion_from_component(vol: &Volume, comp: Vec<usize>) -> Lesion {
    let max_hu = comp.iter().map(|&i| vol.voxels()[i]).max().unwrap_or(0);
    let volume_mm3 = comp.len() as f64 * vol.voxel_volume_mm3();
    Lesion {
        voxels: comp,
        max_hu,
        volume_mm3,
    }
}

/// All 3-D lesions of a volume at the given threshold.
pub fn find_lesions_3d(vol: &Volume, threshold_hu: i16) -> Vec<Lesion> {
    let mask = threshold_mask(vol.voxels(), threshold_hu);
    components_3d(&mask, vol.dims())
        .into_iter()
        .map(|c| lesion_from_component(vol, c))
        .collect()
}

/// All 8-connected lesions in one axial plane of raw HU values.
pub fn find_slice_lesions(
    plane: &[i16],
    dims: (usize, usize),
    pixel_area_mm2: f64,
    threshold_hu: i16,
) -> Vec<SliceLesion> {
    let mask = threshold_mask(plane, threshold_hu);
    components_2d(&mask, dims)
        .into_iter()
        .map(|c| {
            let max_hu = c.iter().map(|&i| plane[i]).max().unwrap_or(0);
            SliceLesion {
                area_mm2: c.len() as f64 * pixel_area_mm2,
                pixels: c,
                max_hu,
            }
        })
        .collect()
}

/// Grows the lesion containing `seed` (a flat voxel index) by breadth-first
/// expansion over 26-connected above-threshold voxels. Yields exactly the
/// connected component the seed belongs to.
pub fn region_grow_3d(vol: &Volume, seed: usize, threshold_hu: i16) -> Result<Lesion> {
    let (nx, ny, nz) = vol.dims();
    if seed >= nx * ny * nz {
        return Err(CoreError::invalid("seed index out of range"));
    }
    if vol.voxels()[seed] < threshold_hu {
        return Err(CoreError::invalid("seed voxel is below threshold"));
    }
    let mut visited = vec![false; vol.voxels().len()];
    visited[seed] = true;
    let mut queue = vec![seed];
    let mut comp = Vec::new();
    while let Some(idx) = queue.pop() {
        comp.push(idx);
        let z = idx / (nx * ny);
        let rem = idx % (nx * ny);
        let y = rem / nx;
        let x = rem % nx;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let xx = x as i64 + dx;
                    let yy = y as i64 + dy;
                    let zz = z as i64 + dz;
                    if xx < 0
                        || yy < 0
                        || zz < 0
                        || xx >= nx as i64
                        || yy >= ny as i64
                        || zz >= nz as i64
                    {
                        continue;
                    }
                    let n = (zz as usize * ny + yy as usize) * nx + xx as usize;
                    if !visited[n] && vol.voxels()[n] >= threshold_hu {
                        visited[n] = true;
                        queue.push(n);
                    }
                }
            }
        }
    }
    comp.sort_unstable();
    Ok(lesion_from_component(vol, comp))
}

/// Keeps lesions whose volume lies in [min_mm3, max_mm3], both inclusive.
pub fn filter_candidates(lesions: Vec<Lesion>, min_mm3: f64, max_mm3: f64) -> Vec<Lesion> {
    lesions
        .into_iter()
        .filter(|l| l.volume_mm3 >= min_mm3 && l.volume_mm3 <= max_mm3)
        .collect()
}
