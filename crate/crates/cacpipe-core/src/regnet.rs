//! Atlas construction and one-shot rigid registration.
//!
//! The atlas is a voxelwise mean of the training volumes in a downsampled
//! reference frame. A small regression ConvNet maps a downsampled volume to
//! six rigid transform parameters in a single forward pass; it is trained
//! without labels by maximising normalised cross correlation between the
//! atlas and the volume warped with its own predicted transform. After
//! training, the atlas can be sharpened by re-averaging the registered
//! volumes. Inference rescales the predicted parameters to full-resolution
//! units, selects the axial slab the atlas maps onto, and warps each
//! selected slice onto a fixed-size atlas-aligned grid for scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::gradnet::{
    adam_step, backward_range, forward_infer, forward_train, ncc_loss, spatial_transform_3d,
    spatial_transform_3d_backward, AdamState, NetSpec, NetState, Tensor,
};
use crate::real::Real;
use crate::rng::{mix_seed, rng_from_seed};
use crate::volgrid::{
    avg_pool_downsample, bilinear_warp_into, downsample_factors, RealVolume, Slice2D, Volume,
};
use crate::xform::{apply_t3d, compose_t2d, compose_t3d, constrain, select_slices, RigidParams};

/// Fill value for warped normalised intensities (air).
const NORM_FILL: f64 = -1.0;

/// Seed streams, mixed with the config seed.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

/// Where an atlas came from: the volumes averaged into it and how many
/// registration-driven refinement rounds it has been through (0 for an
/// initial centre-aligned atlas).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtlasProvenance {
    /// Identifiers of the averaged volumes, in input order.
    pub volume_ids: Vec<String>,
    /// Completed refinement rounds.
    pub refinements: usize,
}

/// Mean reference volume in the downsampled registration frame.
#[derive(Clone, Debug)]
pub struct Atlas {
    /// Downsampled mean volume, HU-valued.
    pub volume: Volume,
    /// Axial extent of the reference frame in original-resolution slices.
    pub d_z: usize,
    /// Construction record.
    pub provenance: AtlasProvenance,
}

/// Registration training hyperparameters.
///
/// `Default` gives the desk-scale schedule: 2,000 iterations of batch 8 at
/// a fixed learning rate of 1e-3.
#[derive(Clone, Debug)]
pub struct RegTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2_000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One logged training step: mean loss over the mini-batch before the
/// parameter update.
#[derive(Clone, Copy, Debug)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
}

/// A trained (or freshly initialised) registration network.
#[derive(Clone, Debug)]
pub struct RegNet<R: Real> {
    /// Layer stack, including the averaging pre-pool skipped by the
    /// pre-pooled entry points.
    pub spec: NetSpec,
    pub state: NetState<R>,
    /// Optimiser steps taken; 0 means untrained.
    pub steps: u64,
}

/// Atlas-aligned axial slices plus the source slice indices they came from.
///
/// `slices[i]` was warped out of original slice `slice_range.start + i`, so
/// per-slice reference scores can be paired with network inputs.
#[derive(Clone, Debug)]
pub struct WarpedSlab {
    pub slices: Vec<Slice2D>,
    pub slice_range: Range<usize>,
}

fn norm_hu(v: f64) -> f64 {
    v.clamp(-1000.0, 1000.0) / 1000.0
}

/// Downsamples a volume for the registration net: HU values are clamped to
/// [-1000, 1000] and divided by 1000, then mean-pooled with the factors for
/// the volume's slice increment (ceil-mode, partial border blocks average
/// over their actual extent). Returns a [depth, rows, cols] tensor.
pub fn pool_for_registration<R: Real>(vol: &Volume) -> Result<Tensor<R>> {
    let (fx, fy, fz) = downsample_factors(vol.slice_increment_mm);
    let (nx, ny, nz) = vol.dims();
    let (ox, oy, oz) = (nx.div_ceil(fx), ny.div_ceil(fy), nz.div_ceil(fz));
    let mut data = Vec::with_capacity(ox * oy * oz);
    let voxels = vol.voxels();
    for bz in 0..oz {
        let z1 = ((bz + 1) * fz).min(nz);
        for by in 0..oy {
            let y1 = ((by + 1) * fy).min(ny);
            for bx in 0..ox {
                let x1 = ((bx + 1) * fx).min(nx);
                let mut sum = 0.0f64;
                for z in bz * fz..z1 {
                    for y in by * fy..y1 {
                        let row = (z * ny + y) * nx;
                        for x in bx * fx..x1 {
                            sum += norm_hu(voxels[row + x] as f64);
                        }
                    }
                }
                let count = (z1 - bz * fz) * (y1 - by * fy) * (x1 - bx * fx);
                data.push(R::from_f64(sum / count as f64));
            }
        }
    }
    Tensor::new(&[oz, oy, ox], data)
}

/// The atlas volume as a normalised net-input tensor.
fn atlas_net_input<R: Real>(atlas: &Atlas) -> Tensor<R> {
    let (nx, ny, nz) = atlas.volume.dims();
    let data = atlas
        .volume
        .voxels()
        .iter()
        .map(|&v| R::from_f64(norm_hu(v as f64)))
        .collect();
    Tensor {
        shape: vec![nz, ny, nx],
        data,
    }
}

/// Lower median of a sample (the value at index (n-1)/2 after sorting), so
/// the result is always an observed value.
fn median_usize(mut xs: Vec<usize>) -> usize {
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2]
}

fn median_f64(mut xs: Vec<f64>) -> f64 {
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("spacing values are finite"));
    xs[(xs.len() - 1) / 2]
}

fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("volume-{i:03}")).collect()
}

/// Builds the initial atlas: the grid takes the median dims and spacing of
/// the inputs (downsampled with the factors for the median slice increment),
/// and every volume is averaged voxelwise after aligning grid centres.
///
/// Needs at least two volumes; the single-volume "atlas" is just that volume
/// and hides averaging bugs.
pub fn build_initial_atlas(volumes: &[Volume]) -> Result<Atlas> {
    if volumes.len() < 2 {
        return Err(CoreError::invalid(
            "atlas construction needs at least two volumes",
        ));
    }
    let median_dims = (
        median_usize(volumes.iter().map(|v| v.dims().0).collect()),
        median_usize(volumes.iter().map(|v| v.dims().1).collect()),
        median_usize(volumes.iter().map(|v| v.dims().2).collect()),
    );
    let spacing = (
        median_f64(volumes.iter().map(|v| v.pixel_spacing_mm.0).collect()),
        median_f64(volumes.iter().map(|v| v.pixel_spacing_mm.1).collect()),
    );
    let thickness = median_f64(volumes.iter().map(|v| v.slice_thickness_mm).collect());
    let increment = median_f64(volumes.iter().map(|v| v.slice_increment_mm).collect());
    let (fx, fy, fz) = downsample_factors(increment);
    let (ax, ay, az) = (
        median_dims.0.div_ceil(fx),
        median_dims.1.div_ceil(fy),
        median_dims.2.div_ceil(fz),
    );
    let (acx, acy, acz) = (
        (ax as f64 - 1.0) / 2.0,
        (ay as f64 - 1.0) / 2.0,
        (az as f64 - 1.0) / 2.0,
    );
    let mut acc = vec![0.0f64; ax * ay * az];
    for vol in volumes {
        let ds = avg_pool_downsample(vol, downsample_factors(vol.slice_increment_mm))?;
        let (dx, dy, dz) = ds.dims();
        let (vcx, vcy, vcz) = (
            (dx as f64 - 1.0) / 2.0,
            (dy as f64 - 1.0) / 2.0,
            (dz as f64 - 1.0) / 2.0,
        );
        for z in 0..az {
            for y in 0..ay {
                for x in 0..ax {
                    let v = ds.sample_trilinear(
                        x as f64 - acx + vcx,
                        y as f64 - acy + vcy,
                        z as f64 - acz + vcz,
                    );
                    acc[(z * ay + y) * ax + x] += v;
                }
            }
        }
    }
    let n = volumes.len() as f64;
    for v in acc.iter_mut() {
        *v /= n;
    }
    let mean = RealVolume::new(
        (ax, ay, az),
        (spacing.0 * fx as f64, spacing.1 * fy as f64),
        thickness,
        increment * fz as f64,
        acc,
    )?;
    Ok(Atlas {
        volume: mean.to_hu_volume()?,
        d_z: median_dims.2,
        provenance: AtlasProvenance {
            volume_ids: default_ids(volumes.len()),
            refinements: 0,
        },
    })
}

/// One atlas refinement round: every volume is registered with the trained
/// net, warped onto the atlas grid, and the warped volumes are re-averaged.
/// The reference frame (grid and `d_z`) is unchanged.
pub fn refine_atlas<R: Real>(
    atlas: &Atlas,
    net: &RegNet<R>,
    volumes: &[Volume],
) -> Result<Atlas> {
    if net.steps == 0 {
        return Err(CoreError::invalid(
            "atlas refinement requires a trained registration net",
        ));
    }
    if volumes.is_empty() {
        return Err(CoreError::invalid("atlas refinement needs volumes"));
    }
    let (ax, ay, az) = atlas.volume.dims();
    let (acx, acy, acz) = (
        (ax as f64 - 1.0) / 2.0,
        (ay as f64 - 1.0) / 2.0,
        (az as f64 - 1.0) / 2.0,
    );
    let mut acc = vec![0.0f64; ax * ay * az];
    for vol in volumes {
        let pooled = pool_for_registration::<R>(vol)?;
        let raw = infer_raw(net, &pooled)?;
        let m = compose_t3d(&constrain(&raw));
        let ds = avg_pool_downsample(vol, downsample_factors(vol.slice_increment_mm))?;
        let (dx, dy, dz) = ds.dims();
        let (vcx, vcy, vcz) = (
            (dx as f64 - 1.0) / 2.0,
            (dy as f64 - 1.0) / 2.0,
            (dz as f64 - 1.0) / 2.0,
        );
        for z in 0..az {
            for y in 0..ay {
                for x in 0..ax {
                    let q = [x as f64 - acx, y as f64 - acy, z as f64 - acz];
                    let p = apply_t3d(&m, q);
                    acc[(z * ay + y) * ax + x] +=
                        ds.sample_trilinear(p[0] + vcx, p[1] + vcy, p[2] + vcz);
                }
            }
        }
    }
    let n = volumes.len() as f64;
    for v in acc.iter_mut() {
        *v /= n;
    }
    let mean = RealVolume::new(
        (ax, ay, az),
        atlas.volume.pixel_spacing_mm,
        atlas.volume.slice_thickness_mm,
        atlas.volume.slice_increment_mm,
        acc,
    )?;
    Ok(Atlas {
        volume: mean.to_hu_volume()?,
        d_z: atlas.d_z,
        provenance: AtlasProvenance {
            volume_ids: default_ids(volumes.len()),
            refinements: atlas.provenance.refinements + 1,
        },
    })
}

/// The net's axial pre-pool factor, recovered from the atlas geometry.
fn axial_pool_of(atlas: &Atlas) -> usize {
    atlas.d_z.div_ceil(atlas.volume.dims().2).max(1)
}

/// Trains the registration net against the atlas.
///
/// Network parameters are initialised from `mix_seed(cfg.seed, 1)` and batch
/// sampling (uniform with replacement) from `mix_seed(cfg.seed, 2)`, so runs
/// with equal inputs are bit-identical. Each step minimises the negative
/// normalised cross correlation between the atlas and a volume warped by its
/// own predicted transform, averaged over the batch, with Adam. Returns the
/// trained net and the per-iteration loss trace.
///
/// With `iterations == 0` the returned state is exactly the initialisation
/// and the net reports itself untrained.
pub fn train_registration<R: Real>(
    volumes: &[Volume],
    atlas: &Atlas,
    cfg: &RegTrainConfig,
) -> Result<(RegNet<R>, Vec<TracePoint>)> {
    if volumes.is_empty() {
        return Err(CoreError::invalid("registration training needs volumes"));
    }
    let pooled = volumes
        .iter()
        .map(pool_for_registration)
        .collect::<Result<Vec<_>>>()?;
    train_registration_pooled(&pooled, atlas, cfg)
}

/// [`train_registration`] on volumes already pooled with
/// [`pool_for_registration`], for callers that stream volumes from disk and
/// keep only the pooled copies in memory.
pub fn train_registration_pooled<R: Real>(
    pooled: &[Tensor<R>],
    atlas: &Atlas,
    cfg: &RegTrainConfig,
) -> Result<(RegNet<R>, Vec<TracePoint>)> {
    if pooled.is_empty() {
        return Err(CoreError::invalid("registration training needs volumes"));
    }
    for t in pooled {
        if t.shape.len() != 3 || t.is_empty() {
            return Err(CoreError::invalid(
                "pooled training volumes must be nonempty [depth, rows, cols] tensors",
            ));
        }
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::invalid("batch size must be nonzero"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(CoreError::invalid("learning rate must be positive"));
    }
    let spec = NetSpec::registration(axial_pool_of(atlas))?;
    let mut state = NetState::<R>::init(&spec, mix_seed(cfg.seed, STREAM_INIT));
    let net_params = spec.param_count();
    let atlas_t = atlas_net_input::<R>(atlas);
    let (anx, any, anz) = atlas.volume.dims();
    let atlas_dims = (anz, any, anx);
    let mut adam = AdamState::new(net_params);
    let mut rng = rng_from_seed(mix_seed(cfg.seed, STREAM_BATCH));
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut grads = vec![0.0f64; net_params];
        let mut loss_sum = 0.0f64;
        // The net has no batch-coupled layers, so processing the mini-batch
        // sample by sample and averaging gradients matches a stacked batch.
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..pooled.len());
            let moving = &pooled[idx];
            let x5 = Tensor::new(
                &[1, 1, moving.shape[0], moving.shape[1], moving.shape[2]],
                moving.data.clone(),
            )?;
            let (out, cache) = forward_train(&spec, &mut state, &x5, 1, true)?;
            let mut raw = [0.0f64; 6];
            for (r, v) in raw.iter_mut().zip(out.data.iter()) {
                *r = v.to_f64();
            }
            let warped = spatial_transform_3d(moving, atlas_dims, &raw, NORM_FILL)?;
            let (loss, dwarp) = ncc_loss(&warped, &atlas_t)?;
            if !loss.is_finite() {
                return Err(CoreError::diverged(format!(
                    "non-finite registration loss at iteration {it}"
                )));
            }
            let draw = spatial_transform_3d_backward(moving, atlas_dims, &raw, NORM_FILL, &dwarp)?;
            let dout = Tensor::new(&[1, 6], draw.to_vec())?;
            let (g, _) = backward_range(&spec, &state, &cache, &dout)?;
            for (a, b) in grads.iter_mut().zip(g.iter()) {
                *a += b;
            }
            loss_sum += loss;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        trace.push(TracePoint {
            iteration: it,
            loss: loss_sum * inv,
        });
        adam_step(&mut adam, &mut state.params, &grads, cfg.lr)
            .map_err(|e| CoreError::diverged(format!("{e} at iteration {it}")))?;
    }
    Ok((
        RegNet {
            spec,
            state,
            steps: cfg.iterations as u64,
        },
        trace,
    ))
}

/// Raw six-parameter regression output for a pooled volume.
fn infer_raw<R: Real>(net: &RegNet<R>, pooled: &Tensor<R>) -> Result<[f64; 6]> {
    if pooled.shape.len() != 3 || pooled.is_empty() {
        return Err(CoreError::invalid(
            "pooled volume must be a nonempty [depth, rows, cols] tensor",
        ));
    }
    let x5 = Tensor::new(
        &[1, 1, pooled.shape[0], pooled.shape[1], pooled.shape[2]],
        pooled.data.clone(),
    )?;
    let (out, _) = forward_infer(&net.spec, &net.state, &x5, 1)?;
    let mut raw = [0.0f64; 6];
    for (r, v) in raw.iter_mut().zip(out.data.iter()) {
        *r = v.to_f64();
    }
    Ok(raw)
}

/// Registers a volume to the atlas in one forward pass and rescales the
/// constrained parameters to full-resolution units.
///
/// In the returned parameters, `t[0]`/`t[1]` and `theta`/`s_xy` keep the
/// trained pull convention (atlas-aligned coordinates sample into the
/// original volume) with translations in original pixels, while the axial
/// pair is restated for slab selection: `t[2]` is the starting slice index
/// of the aligned slab and `s_z` the volume-to-atlas scale, the convention
/// [`select_slices`] consumes. Deterministic: identical voxels and net give
/// bit-identical parameters.
pub fn register<R: Real>(vol: &Volume, net: &RegNet<R>, atlas: &Atlas) -> Result<RigidParams> {
    let pooled = pool_for_registration::<R>(vol)?;
    register_pooled(&pooled, vol.slice_increment_mm, net, atlas)
}

/// [`register`] for a volume already pooled with [`pool_for_registration`];
/// `slice_increment_mm` is the original volume's increment (it picks the
/// pooling factors the axial rescale must undo).
pub fn register_pooled<R: Real>(
    pooled: &Tensor<R>,
    slice_increment_mm: f64,
    net: &RegNet<R>,
    atlas: &Atlas,
) -> Result<RigidParams> {
    let (fx, fy, fz) = downsample_factors(slice_increment_mm);
    let raw = infer_raw(net, pooled)?;
    let p = constrain(&raw);
    let ad = atlas.volume.dims().2;
    let mcz = (pooled.shape[0] as f64 - 1.0) / 2.0;
    // Pull along z: moving_z = s_z * q + t_z + centre, q over the atlas
    // extent; the slab therefore starts at the image of q = -(ad-1)/2.
    let slab_start_ds = p.t[2] + mcz - p.s_z * (ad as f64 - 1.0) / 2.0;
    let slab_start = slab_start_ds * fz as f64 + (fz as f64 - 1.0) / 2.0;
    Ok(RigidParams {
        t: [p.t[0] * fx as f64, p.t[1] * fy as f64, slab_start],
        theta: p.theta,
        s_xy: p.s_xy,
        s_z: 1.0 / p.s_z,
    })
}

/// Selects the axial slab for registration parameters (as returned by
/// [`register`]) and warps every selected slice onto an atlas-aligned grid
/// of `out` pixels covering the full field of view.
///
/// `d_z` is the atlas axial extent in original-resolution slices and
/// `pad_slices` symmetrically widens the selected slab (clamped to the
/// volume) to guard against a slightly misregistered slab cropping calcium.
/// Slice order is preserved and the returned range records which original
/// slice each output came from.
pub fn extract_and_warp(
    vol: &Volume,
    params: &RigidParams,
    d_z: usize,
    out: (usize, usize),
    pad_slices: usize,
) -> Result<WarpedSlab> {
    params.validate()?;
    if d_z == 0 {
        return Err(CoreError::invalid("atlas depth must be nonzero"));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(CoreError::invalid("output dims must be nonzero"));
    }
    let (nx, ny, nz) = vol.dims();
    let range = select_slices(params.t[2], d_z as f64, params.s_z, nz)?;
    let lo = range.start.saturating_sub(pad_slices);
    let hi = (range.end + pad_slices).min(nz);
    // Fold the field-of-view zoom into the pull transform: output pixels map
    // to source-resolution atlas-aligned coordinates, then through the
    // registration transform into the original slice.
    let t2 = compose_t2d(params);
    let zx = nx as f64 / out.0 as f64;
    let zy = ny as f64 / out.1 as f64;
    let m = [
        [t2[0][0] * zx, t2[0][1] * zy, t2[0][2]],
        [t2[1][0] * zx, t2[1][1] * zy, t2[1][2]],
        [0.0, 0.0, 1.0],
    ];
    let mut slices = Vec::with_capacity(hi - lo);
    for z in lo..hi {
        let src = vol.extract_slice(z)?;
        slices.push(bilinear_warp_into(&src, &m, out)?);
    }
    Ok(WarpedSlab {
        slices,
        slice_range: lo..hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::HU_FILL;
    use rand::Rng;

    fn flat_volume(dims: (usize, usize, usize), hu: i16) -> Volume {
        Volume::new(
            dims,
            (0.7, 0.7),
            3.0,
            3.0,
            vec![hu; dims.0 * dims.1 * dims.2],
        )
        .unwrap()
    }

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = rng_from_seed(seed);
        let voxels = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(-1000i16..1000))
            .collect();
        Volume::new(dims, (0.7, 0.7), 3.0, 3.0, voxels).unwrap()
    }

    /// Smooth blob volume so interpolation error stays small.
    fn blob_volume(dims: (usize, usize, usize), centres: &[(f64, f64, f64)]) -> Volume {
        let (nx, ny, nz) = dims;
        let mut voxels = vec![0i16; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut v = -200.0f64;
                    for &(cx, cy, cz) in centres {
                        let r2 = (x as f64 - cx) * (x as f64 - cx)
                            + (y as f64 - cy) * (y as f64 - cy)
                            + (z as f64 - cz) * (z as f64 - cz);
                        v += 600.0 * (-r2 / 60.0).exp();
                    }
                    voxels[(z * ny + y) * nx + x] = v as i16;
                }
            }
        }
        Volume::new(dims, (0.7, 0.7), 3.0, 3.0, voxels).unwrap()
    }

    #[test]
    fn initial_atlas_rejects_too_few_volumes() {
        assert!(build_initial_atlas(&[]).is_err());
        assert!(build_initial_atlas(&[flat_volume((12, 12, 4), 0)]).is_err());
    }

    #[test]
    fn initial_atlas_of_identical_volumes_is_that_volume() {
        let v = random_volume((18, 18, 6), 11);
        let atlas = build_initial_atlas(&[v.clone(), v.clone()]).unwrap();
        let ds = avg_pool_downsample(&v, downsample_factors(v.slice_increment_mm))
            .unwrap()
            .to_hu_volume()
            .unwrap();
        assert_eq!(atlas.volume.dims(), ds.dims());
        assert_eq!(atlas.volume.voxels(), ds.voxels());
        assert_eq!(atlas.d_z, 6);
        assert_eq!(atlas.provenance.refinements, 0);
        assert_eq!(atlas.provenance.volume_ids.len(), 2);
    }

    #[test]
    fn initial_atlas_of_mirrored_pair_is_the_mean_field() {
        let base = 100i16;
        let mut rng = rng_from_seed(5);
        let dims = (12, 12, 6);
        let delta: Vec<i16> = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(-300i16..300))
            .collect();
        let plus: Vec<i16> = delta.iter().map(|d| base + d).collect();
        let minus: Vec<i16> = delta.iter().map(|d| base - d).collect();
        let va = Volume::new(dims, (0.7, 0.7), 3.0, 3.0, plus).unwrap();
        let vb = Volume::new(dims, (0.7, 0.7), 3.0, 3.0, minus).unwrap();
        let atlas = build_initial_atlas(&[va, vb]).unwrap();
        for &v in atlas.volume.voxels() {
            assert!(
                (v - base).abs() <= 1,
                "atlas voxel {v} should be the shared mean {base}"
            );
        }
    }

    #[test]
    fn initial_atlas_matches_direct_mean_oracle() {
        let vols: Vec<Volume> = (0..5).map(|i| random_volume((24, 18, 8), 40 + i)).collect();
        let atlas = build_initial_atlas(&vols).unwrap();
        // Equal dims: centre alignment is exact, so the atlas is the plain
        // voxelwise mean of the downsampled volumes.
        let ds: Vec<RealVolume> = vols
            .iter()
            .map(|v| avg_pool_downsample(v, downsample_factors(v.slice_increment_mm)).unwrap())
            .collect();
        let n = ds[0].data().len();
        let mut mean = vec![0.0f64; n];
        for d in &ds {
            for (m, v) in mean.iter_mut().zip(d.data().iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= vols.len() as f64;
        }
        let oracle = RealVolume::new(
            ds[0].dims(),
            ds[0].pixel_spacing_mm,
            ds[0].slice_thickness_mm,
            ds[0].slice_increment_mm,
            mean,
        )
        .unwrap()
        .to_hu_volume()
        .unwrap();
        assert_eq!(atlas.volume.dims(), oracle.dims());
        for (a, o) in atlas.volume.voxels().iter().zip(oracle.voxels()) {
            assert!((a - o).abs() <= 1, "atlas {a} vs oracle {o}");
        }
    }

    #[test]
    fn pooling_normalises_and_matches_plain_average() {
        let v = flat_volume((13, 12, 5), 500);
        let t = pool_for_registration::<f64>(&v).unwrap();
        assert_eq!(t.shape, vec![5, 2, 3]);
        for &x in &t.data {
            assert!((x - 0.5).abs() < 1e-12);
        }
        // Values past the clamp saturate before pooling.
        let v = flat_volume((6, 6, 2), 3000);
        let t = pool_for_registration::<f64>(&v).unwrap();
        for &x in &t.data {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iteration_training_returns_untrained_initialisation() {
        let vols: Vec<Volume> = (0..2).map(|i| random_volume((18, 18, 6), 60 + i)).collect();
        let atlas = build_initial_atlas(&vols).unwrap();
        let cfg = RegTrainConfig {
            iterations: 0,
            seed: 9,
            ..RegTrainConfig::default()
        };
        let (net, trace) = train_registration::<f32>(&vols, &atlas, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(net.steps, 0);
        let fresh = NetState::<f32>::init(&net.spec, mix_seed(9, 1));
        assert_eq!(net.state.params, fresh.params);
        assert!(refine_atlas(&atlas, &net, &vols).is_err());
    }

    #[test]
    fn training_rejects_bad_inputs_and_nonfinite_data() {
        let vols = vec![random_volume((18, 18, 6), 3)];
        let atlas = build_initial_atlas(&[vols[0].clone(), vols[0].clone()]).unwrap();
        assert!(train_registration::<f32>(&[], &atlas, &RegTrainConfig::default()).is_err());
        let cfg = RegTrainConfig {
            batch_size: 0,
            ..RegTrainConfig::default()
        };
        assert!(train_registration::<f32>(&vols, &atlas, &cfg).is_err());
        let mut pooled = pool_for_registration::<f64>(&vols[0]).unwrap();
        pooled.data[0] = f64::NAN;
        let cfg = RegTrainConfig {
            iterations: 1,
            batch_size: 1,
            ..RegTrainConfig::default()
        };
        let err = train_registration_pooled(&[pooled], &atlas, &cfg);
        assert!(err.is_err(), "NaN input must abort with a diagnostic");
    }

    #[test]
    fn register_is_deterministic() {
        let vols: Vec<Volume> = (0..2).map(|i| random_volume((30, 30, 8), 80 + i)).collect();
        let atlas = build_initial_atlas(&vols).unwrap();
        let cfg = RegTrainConfig {
            iterations: 3,
            batch_size: 2,
            seed: 4,
            ..RegTrainConfig::default()
        };
        let (net, trace) = train_registration::<f32>(&vols, &atlas, &cfg).unwrap();
        assert_eq!(trace.len(), 3);
        let a = register(&vols[0], &net, &atlas).unwrap();
        let b = register(&vols[0], &net, &atlas).unwrap();
        assert_eq!(a.t[0].to_bits(), b.t[0].to_bits());
        assert_eq!(a.t[2].to_bits(), b.t[2].to_bits());
        assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        assert_eq!(a.s_xy.to_bits(), b.s_xy.to_bits());
        assert_eq!(a.s_z.to_bits(), b.s_z.to_bits());
        // Training twice from the same seed reproduces the same net.
        let (net2, _) = train_registration::<f32>(&vols, &atlas, &cfg).unwrap();
        assert_eq!(net.state.params, net2.state.params);
    }

    #[test]
    fn extract_identity_returns_slices_unchanged() {
        let v = random_volume((64, 64, 10), 21);
        let slab = extract_and_warp(&v, &RigidParams::identity(), 10, (64, 64), 0).unwrap();
        assert_eq!(slab.slice_range, 0..10);
        assert_eq!(slab.slices.len(), 10);
        for (z, s) in slab.slices.iter().enumerate() {
            let orig = v.extract_slice(z).unwrap();
            assert_eq!(s.pixels, orig.pixels, "slice {z} changed under identity");
        }
    }

    #[test]
    fn extract_axial_scale_halves_slice_count() {
        let v = random_volume((32, 32, 10), 22);
        let mut p = RigidParams::identity();
        p.s_z = 2.0;
        let slab = extract_and_warp(&v, &p, 10, (32, 32), 0).unwrap();
        assert_eq!(slab.slices.len(), 5);
        assert_eq!(slab.slice_range, 0..5);
    }

    #[test]
    fn extract_rejects_empty_slab_and_pads_symmetrically() {
        let v = random_volume((16, 16, 8), 23);
        let mut p = RigidParams::identity();
        p.t[2] = 20.0;
        assert!(extract_and_warp(&v, &p, 8, (16, 16), 0).is_err());
        let mut p = RigidParams::identity();
        p.t[2] = 3.0;
        let slab = extract_and_warp(&v, &p, 2, (16, 16), 2).unwrap();
        assert_eq!(slab.slice_range, 1..7);
    }

    #[test]
    fn extract_resizes_field_of_view() {
        // A slice that is bright in the image centre: the zoomed-out warp
        // must keep the bright region centred.
        let v = blob_volume((64, 64, 3), &[(31.5, 31.5, 1.0)]);
        let slab = extract_and_warp(&v, &RigidParams::identity(), 3, (32, 32), 0).unwrap();
        let s = &slab.slices[1];
        assert_eq!(s.dims, (32, 32));
        let centre = s.at(16, 16);
        let corner = s.at(1, 1);
        assert!(centre > 300.0 && corner < 0.0, "centre {centre} corner {corner}");
        assert!((s.applied_scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warp_roundtrip_error_is_small_in_the_interior() {
        let v = blob_volume((96, 96, 1), &[(40.0, 52.0, 0.0), (60.0, 40.0, 0.0)]);
        let p = RigidParams {
            t: [3.2, -2.7, 0.0],
            theta: 5.0f64.to_radians(),
            s_xy: 1.08,
            s_z: 1.0,
        };
        let slab = extract_and_warp(&v, &p, 1, (96, 96), 0).unwrap();
        // Invert the in-plane transform: (R S)^-1 with translation -S^-1 R^-1 t.
        let inv = RigidParams {
            t: [
                -(p.theta.cos() * p.t[0] + p.theta.sin() * p.t[1]) / p.s_xy,
                -(-p.theta.sin() * p.t[0] + p.theta.cos() * p.t[1]) / p.s_xy,
                0.0,
            ],
            theta: -p.theta,
            s_xy: 1.0 / p.s_xy,
            s_z: 1.0,
        };
        let back = bilinear_warp_into(&slab.slices[0], &compose_t2d(&inv), (96, 96)).unwrap();
        let orig = v.extract_slice(0).unwrap();
        let mut worst = 0.0f64;
        for y in 16..80 {
            for x in 16..80 {
                let e = (back.at(x, y) as f64 - orig.at(x, y) as f64).abs();
                worst = worst.max(e);
            }
        }
        assert!(worst <= 2.0, "interior roundtrip error {worst} HU");
    }

    #[test]
    fn roundtrip_parameters_survive_slab_conversion() {
        // register() restates the axial pair; feeding its output through
        // select_slices must reproduce the slab implied by the pull warp.
        let vols: Vec<Volume> = (0..2).map(|i| random_volume((30, 30, 12), 90 + i)).collect();
        let atlas = build_initial_atlas(&vols).unwrap();
        let cfg = RegTrainConfig {
            iterations: 2,
            batch_size: 1,
            seed: 12,
            ..RegTrainConfig::default()
        };
        let (net, _) = train_registration::<f32>(&vols, &atlas, &cfg).unwrap();
        let p = register(&vols[0], &net, &atlas).unwrap();
        assert!(p.validate().is_ok());
        assert!(p.s_z > 0.0 && p.s_xy > 0.0);
        let range = select_slices(p.t[2], atlas.d_z as f64, p.s_z, 12).unwrap();
        assert!(!range.is_empty());
        // The slab length approximates d_z / s_z.
        let want = atlas.d_z as f64 / p.s_z;
        assert!((range.len() as f64 - want).abs() <= 2.0 + 1.0);
    }

    #[test]
    fn fill_value_matches_normalised_air() {
        assert!((norm_hu(HU_FILL) - NORM_FILL).abs() < 1e-15);
    }
}
