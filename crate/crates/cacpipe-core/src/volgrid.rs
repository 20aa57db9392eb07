//! Volume and slice containers plus the resampling primitives built on them.
//!
//! A [`Volume`] stores calibrated CT numbers (HU) as `i16` on a regular grid,
//! x-fastest. Geometry is carried explicitly: in-plane pixel spacing, slice
//! thickness, and slice increment, all in millimetres. Slice increment and
//! thickness are tracked separately because overlapping reconstructions
//! (increment < thickness) change both the volume-per-slice bookkeeping and
//! axial resampling weights.
//!
//! Sampling coordinates throughout this crate live in array-index space:
//! the point `(i, j, k)` is the centre of voxel `(i, j, k)`. Geometric
//! transforms operate about the volume centre; producers of sample points add
//! the centre offset before calling the samplers here. Samples outside the
//! grid blend toward the fill value of -1000 HU (air).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::f64math;

/// Minimum representable CT number.
pub const HU_MIN: i16 = -1024;
/// Maximum representable CT number.
pub const HU_MAX: i16 = 3071;
/// Fill value for samples outside the grid: air.
pub const HU_FILL: f64 = -1000.0;

/// Calibrated CT volume on a regular grid, voxels stored x-fastest.
#[derive(Clone, Debug)]
pub struct Volume {
    dims: (usize, usize, usize),
    /// In-plane pixel spacing (x, y) in mm.
    pub pixel_spacing_mm: (f64, f64),
    /// Reconstructed slice thickness in mm.
    pub slice_thickness_mm: f64,
    /// Spacing between consecutive slice centres in mm.
    pub slice_increment_mm: f64,
    voxels: Vec<i16>,
}

impl Volume {
    /// Builds a volume after validating geometry and HU range.
    pub fn new(
        dims: (usize, usize, usize),
        pixel_spacing_mm: (f64, f64),
        slice_thickness_mm: f64,
        slice_increment_mm: f64,
        voxels: Vec<i16>,
    ) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(CoreError::geometry("volume dims must be nonzero"));
        }
        let n = dims
            .0
            .checked_mul(dims.1)
            .and_then(|v| v.checked_mul(dims.2))
            .ok_or_else(|| CoreError::geometry("volume dims overflow"))?;
        if voxels.len() != n {
            return Err(CoreError::invalid("voxel buffer length does not match dims"));
        }
        if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0) {
            return Err(CoreError::geometry("pixel spacing must be positive"));
        }
        if !(slice_thickness_mm > 0.0) || !(slice_increment_mm > 0.0) {
            return Err(CoreError::geometry(
                "slice thickness and increment must be positive",
            ));
        }
        if let Some(&v) = voxels.iter().find(|&&v| v < HU_MIN || v > HU_MAX) {
            return Err(CoreError::invalid(alloc::format!(
                "voxel value {v} outside HU range [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Self {
            dims,
            pixel_spacing_mm,
            slice_thickness_mm,
            slice_increment_mm,
            voxels,
        })
    }

    /// Uniform volume of the given value.
    pub fn filled(
        dims: (usize, usize, usize),
        pixel_spacing_mm: (f64, f64),
        slice_thickness_mm: f64,
        slice_increment_mm: f64,
        value: i16,
    ) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Self::new(
            dims,
            pixel_spacing_mm,
            slice_thickness_mm,
            slice_increment_mm,
            vec![value; n],
        )
    }

    /// Grid dimensions (nx, ny, nz).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Raw voxel buffer, x-fastest.
    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    /// Mutable voxel buffer. Callers must keep values within the HU range.
    pub fn voxels_mut(&mut self) -> &mut [i16] {
        &mut self.voxels
    }

    /// Flat index of voxel (x, y, z).
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    /// Voxel value at (x, y, z). Panics if out of bounds.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// The axial plane `z` as a contiguous row-major (y, x) subslice.
    pub fn plane(&self, z: usize) -> &[i16] {
        let n = self.dims.0 * self.dims.1;
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Volume of one voxel in mm^3, using the slice increment as the axial
    /// extent so overlapping slices are not double counted.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.pixel_spacing_mm.0 * self.pixel_spacing_mm.1 * self.slice_increment_mm
    }

    /// Extracts axial plane `z` as a real-valued slice with unit scale.
    pub fn extract_slice(&self, z: usize) -> Result<Slice2D> {
        if z >= self.dims.2 {
            return Err(CoreError::invalid(alloc::format!(
                "slice index {z} out of range 0..{}",
                self.dims.2
            )));
        }
        let pixels = self.plane(z).iter().map(|&v| v as f32).collect();
        Ok(Slice2D {
            dims: (self.dims.0, self.dims.1),
            pixel_area_mm2: self.pixel_spacing_mm.0 * self.pixel_spacing_mm.1,
            applied_scale: 1.0,
            pixels,
        })
    }

    /// Trilinear sample at array-index coordinates, blending to -1000 HU
    /// outside the grid. Exact at lattice points.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64) -> f64 {
        let (nx, ny, nz) = self.dims;
        sample_trilinear_impl(x, y, z, nx, ny, nz, |ix, iy, iz| {
            self.voxels[(iz * ny + iy) * nx + ix] as f64
        })
    }
}

/// Real-valued volume on the same geometric conventions as [`Volume`].
///
/// Produced by average-pool downsampling and atlas construction, where the
/// integer HU grid would lose the fractional averages the registration model
/// trains on.
#[derive(Clone, Debug)]
pub struct RealVolume {
    dims: (usize, usize, usize),
    /// In-plane pixel spacing (x, y) in mm.
    pub pixel_spacing_mm: (f64, f64),
    /// Slice thickness in mm.
    pub slice_thickness_mm: f64,
    /// Slice increment in mm.
    pub slice_increment_mm: f64,
    data: Vec<f64>,
}

impl RealVolume {
    /// Builds a real volume after validating geometry.
    pub fn new(
        dims: (usize, usize, usize),
        pixel_spacing_mm: (f64, f64),
        slice_thickness_mm: f64,
        slice_increment_mm: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(CoreError::geometry("volume dims must be nonzero"));
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(CoreError::invalid("data length does not match dims"));
        }
        if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0)
            || !(slice_thickness_mm > 0.0)
            || !(slice_increment_mm > 0.0)
        {
            return Err(CoreError::geometry("spacing values must be positive"));
        }
        Ok(Self {
            dims,
            pixel_spacing_mm,
            slice_thickness_mm,
            slice_increment_mm,
            data,
        })
    }

    /// Grid dimensions (nx, ny, nz).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Raw data, x-fastest.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable raw data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index of voxel (x, y, z).
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    /// Value at (x, y, z). Panics if out of bounds.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Trilinear sample at array-index coordinates with -1000 fill.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64) -> f64 {
        let (nx, ny, nz) = self.dims;
        sample_trilinear_impl(x, y, z, nx, ny, nz, |ix, iy, iz| {
            self.data[(iz * ny + iy) * nx + ix]
        })
    }

    /// Rounds to the HU grid (half away from zero) and clamps to range.
    pub fn to_hu_volume(&self) -> Result<Volume> {
        let voxels = self
            .data
            .iter()
            .map(|&v| {
                let r = f64math::round(v);
                let r = r.clamp(HU_MIN as f64, HU_MAX as f64);
                r as i16
            })
            .collect();
        Volume::new(
            self.dims,
            self.pixel_spacing_mm,
            self.slice_thickness_mm,
            self.slice_increment_mm,
            voxels,
        )
    }
}

/// Real-valued 2-D axial slice.
///
/// `pixel_area_mm2` is the area one pixel covers in the source volume and
/// `applied_scale` the in-plane scale factor of the warp that produced the
/// slice (1 for a raw extraction); together they let scoring convert pixel
/// counts back to physical area.
#[derive(Clone, Debug)]
pub struct Slice2D {
    /// Grid dimensions (nx, ny).
    pub dims: (usize, usize),
    /// Area of one source pixel in mm^2.
    pub pixel_area_mm2: f64,
    /// In-plane scale applied when the slice was produced.
    pub applied_scale: f64,
    /// Pixel values, x-fastest.
    pub pixels: Vec<f32>,
}

impl Slice2D {
    /// Zero-filled slice.
    pub fn zeros(dims: (usize, usize), pixel_area_mm2: f64) -> Self {
        Self {
            dims,
            pixel_area_mm2,
            applied_scale: 1.0,
            pixels: vec![0.0; dims.0 * dims.1],
        }
    }

    /// Pixel value at (x, y). Panics if out of bounds.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.dims.0 + x]
    }

    /// Bilinear sample at array-index coordinates, blending to `fill`
    /// outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (nx, ny) = self.dims;
        let fx = f64math::floor(x);
        let fy = f64math::floor(y);
        let tx = x - fx;
        let ty = y - fy;
        let x0 = fx as i64;
        let y0 = fy as i64;
        let fetch = |ix: i64, iy: i64| -> f64 {
            if ix < 0 || iy < 0 || ix >= nx as i64 || iy >= ny as i64 {
                fill
            } else {
                self.pixels[iy as usize * nx + ix as usize] as f64
            }
        };
        let v00 = fetch(x0, y0);
        let v10 = fetch(x0 + 1, y0);
        let v01 = fetch(x0, y0 + 1);
        let v11 = fetch(x0 + 1, y0 + 1);
        let a = v00 * (1.0 - tx) + v10 * tx;
        let b = v01 * (1.0 - tx) + v11 * tx;
        a * (1.0 - ty) + b * ty
    }
}

fn sample_trilinear_impl<F>(x: f64, y: f64, z: f64, nx: usize, ny: usize, nz: usize, get: F) -> f64
where
    F: Fn(usize, usize, usize) -> f64,
{
    let fx = f64math::floor(x);
    let fy = f64math::floor(y);
    let fz = f64math::floor(z);
    let tx = x - fx;
    let ty = y - fy;
    let tz = z - fz;
    let x0 = fx as i64;
    let y0 = fy as i64;
    let z0 = fz as i64;
    let fetch = |ix: i64, iy: i64, iz: i64| -> f64 {
        if ix < 0
            || iy < 0
            || iz < 0
            || ix >= nx as i64
            || iy >= ny as i64
            || iz >= nz as i64
        {
            HU_FILL
        } else {
            get(ix as usize, iy as usize, iz as usize)
        }
    };
    let mut acc = 0.0;
    for dz in 0..2i64 {
        let wz = if dz == 0 { 1.0 - tz } else { tz };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2i64 {
            let wy = if dy == 0 { 1.0 - ty } else { ty };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2i64 {
                let wx = if dx == 0 { 1.0 - tx } else { tx };
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * fetch(x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

/// Downsample factors for registration preprocessing, chosen from the slice
/// increment: thick reconstructions (increment >= 2.5 mm) keep the axial
/// resolution, thinner ones are halved axially.
pub fn downsample_factors(slice_increment_mm: f64) -> (usize, usize, usize) {
    if slice_increment_mm >= 2.5 {
        (6, 6, 1)
    } else {
        (6, 6, 2)
    }
}

/// Average-pool downsampling with ceil-mode output dims.
///
/// Output voxel (X, Y, Z) is the mean of the input block starting at
/// (X*fx, Y*fy, Z*fz); blocks truncated at the far borders average over their
/// actual extent. Accumulation is in f64, so a volume whose dims divide the
/// factors keeps its global mean exactly.
pub fn avg_pool_downsample(vol: &Volume, factors: (usize, usize, usize)) -> Result<RealVolume> {
    let (fx, fy, fz) = factors;
    if fx == 0 || fy == 0 || fz == 0 {
        return Err(CoreError::invalid("pool factors must be nonzero"));
    }
    let (nx, ny, nz) = vol.dims();
    let ox = nx.div_ceil(fx);
    let oy = ny.div_ceil(fy);
    let oz = nz.div_ceil(fz);
    let mut data = vec![0.0f64; ox * oy * oz];
    for bz in 0..oz {
        let z0 = bz * fz;
        let z1 = (z0 + fz).min(nz);
        for by in 0..oy {
            let y0 = by * fy;
            let y1 = (y0 + fy).min(ny);
            for bx in 0..ox {
                let x0 = bx * fx;
                let x1 = (x0 + fx).min(nx);
                let mut sum = 0.0f64;
                for z in z0..z1 {
                    for y in y0..y1 {
                        let row = (z * ny + y) * nx;
                        for x in x0..x1 {
                            sum += vol.voxels()[row + x] as f64;
                        }
                    }
                }
                let count = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                data[(bz * oy + by) * ox + bx] = sum / count;
            }
        }
    }
    RealVolume::new(
        (ox, oy, oz),
        (
            vol.pixel_spacing_mm.0 * fx as f64,
            vol.pixel_spacing_mm.1 * fy as f64,
        ),
        vol.slice_thickness_mm,
        vol.slice_increment_mm * fz as f64,
        data,
    )
}

/// Warps a slice by the pull transform `t` (3x3 homogeneous, acting about the
/// slice centre): output pixel p is sampled at `t * p` in the input.
///
/// Output dims equal input dims. Samples outside the input blend to -1000.
/// The returned slice records `applied_scale` as sqrt(|det|) of the linear
/// part so downstream area bookkeeping can undo the zoom; a near-singular
/// transform is an error.
pub fn bilinear_warp_slice(src: &Slice2D, t: &[[f64; 3]; 3]) -> Result<Slice2D> {
    bilinear_warp_into(src, t, src.dims)
}

/// [`bilinear_warp_slice`] onto an explicit output grid: each transform side
/// acts about its own grid centre, so changing `out_dims` re-frames the same
/// field of view rather than cropping it.
pub fn bilinear_warp_into(
    src: &Slice2D,
    t: &[[f64; 3]; 3],
    out_dims: (usize, usize),
) -> Result<Slice2D> {
    let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
    if f64math::abs(det) < 1e-12 {
        return Err(CoreError::geometry("warp transform is singular"));
    }
    let (ox, oy) = out_dims;
    if ox == 0 || oy == 0 {
        return Err(CoreError::geometry("warp output dims must be nonzero"));
    }
    let cx = (src.dims.0 as f64 - 1.0) / 2.0;
    let cy = (src.dims.1 as f64 - 1.0) / 2.0;
    let ocx = (ox as f64 - 1.0) / 2.0;
    let ocy = (oy as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0f32; ox * oy];
    for y in 0..oy {
        let qy = y as f64 - ocy;
        for x in 0..ox {
            let qx = x as f64 - ocx;
            let sx = t[0][0] * qx + t[0][1] * qy + t[0][2] + cx;
            let sy = t[1][0] * qx + t[1][1] * qy + t[1][2] + cy;
            pixels[y * ox + x] = src.sample_bilinear(sx, sy, HU_FILL) as f32;
        }
    }
    Ok(Slice2D {
        dims: (ox, oy),
        pixel_area_mm2: src.pixel_area_mm2,
        applied_scale: src.applied_scale * f64math::sqrt(f64math::abs(det)),
        pixels,
    })
}

/// Resamples a volume along z to a new slice thickness and increment.
///
/// Slice centres of the output start at the first input centre; the output
/// covers only positions whose full thickness lies inside the input extent
/// (first centre minus half the input thickness through last centre plus
/// half). Each output slice averages input slices weighted by the overlap of
/// their thickness intervals with the output slice's thickness interval.
/// Identical thickness and increment return a copy.
pub fn resample_axial(
    vol: &Volume,
    new_thickness_mm: f64,
    new_increment_mm: f64,
) -> Result<Volume> {
    if !(new_thickness_mm > 0.0) || !(new_increment_mm > 0.0) {
        return Err(CoreError::geometry(
            "resample thickness and increment must be positive",
        ));
    }
    if new_thickness_mm == vol.slice_thickness_mm && new_increment_mm == vol.slice_increment_mm {
        let mut out = vol.clone();
        out.slice_thickness_mm = new_thickness_mm;
        out.slice_increment_mm = new_increment_mm;
        return Ok(out);
    }
    let (nx, ny, nz) = vol.dims();
    let t_in = vol.slice_thickness_mm;
    let i_in = vol.slice_increment_mm;
    // Extent covered by input slabs, measured from the first slice centre.
    let span = (nz as f64 - 1.0) * i_in + t_in;
    let n_out = (f64math::floor((span - new_thickness_mm) / new_increment_mm) + 1.0) as i64;
    if n_out < 1 {
        return Err(CoreError::geometry(
            "volume too thin for requested axial resampling",
        ));
    }
    let n_out = n_out as usize;
    let plane = nx * ny;
    let mut voxels = vec![0i16; plane * n_out];
    // Output slice k spans [k*i_new, k*i_new + t_new) offset so both extents
    // start at -t_in/2 relative to the first input centre.
    for k in 0..n_out {
        let lo = -t_in / 2.0 + k as f64 * new_increment_mm;
        let hi = lo + new_thickness_mm;
        // Weight per input slice: overlap of [c - t/2, c + t/2) with [lo, hi).
        let mut weights: Vec<(usize, f64)> = Vec::new();
        let mut wsum = 0.0f64;
        let z_first = ((lo + t_in / 2.0) / i_in - t_in / i_in).max(0.0) as usize;
        for z in z_first..nz {
            let c = z as f64 * i_in;
            let s_lo = c - t_in / 2.0;
            let s_hi = c + t_in / 2.0;
            if s_lo >= hi {
                break;
            }
            let ov = (s_hi.min(hi) - s_lo.max(lo)).max(0.0);
            if ov > 0.0 {
                weights.push((z, ov));
                wsum += ov;
            }
        }
        if weights.is_empty() || wsum <= 0.0 {
            return Err(CoreError::geometry("axial resampling produced empty slice"));
        }
        for idx in 0..plane {
            let mut acc = 0.0f64;
            for &(z, w) in &weights {
                acc += w * vol.voxels()[z * plane + idx] as f64;
            }
            let v = f64math::round(acc / wsum).clamp(HU_MIN as f64, HU_MAX as f64);
            voxels[k * plane + idx] = v as i16;
        }
    }
    Volume::new(
        (nx, ny, n_out),
        vol.pixel_spacing_mm,
        new_thickness_mm,
        new_increment_mm,
        voxels,
    )
}
