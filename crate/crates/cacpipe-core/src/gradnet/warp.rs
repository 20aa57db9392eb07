//! Differentiable resampling of a moving volume onto an atlas grid under
//! the constrained rigid transform.
//!
//! The warp pulls: each atlas voxel maps through the transform into the
//! moving volume and interpolates trilinearly, with a fill value outside.
//! The backward pass chains a loss gradient on the warped volume through
//! the interpolation weights, the transform matrix, and the tanh parameter
//! constraints down to the six raw regression outputs.

use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::real::{f64math, Real};
use crate::xform::{apply_t3d, compose_t3d, constrain, constrain_jacobian};

/// Centre of an axis with `n` samples, in array-index coordinates.
fn centre(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}

fn check_moving<R: Real>(moving: &Tensor<R>) -> Result<(usize, usize, usize)> {
    if moving.shape.len() != 3 {
        return Err(CoreError::invalid("moving volume must be [depth, rows, cols]"));
    }
    let (d, h, w) = (moving.shape[0], moving.shape[1], moving.shape[2]);
    if d == 0 || h == 0 || w == 0 {
        return Err(CoreError::invalid("moving volume must be nonempty"));
    }
    Ok((d, h, w))
}

/// Trilinear sample with its spatial derivative.
///
/// Returns (value, d/dx, d/dy, d/dz) at continuous position (x, y, z) in
/// array-index coordinates; out-of-range corners take the fill value.
fn sample_with_grad<R: Real>(
    moving: &Tensor<R>,
    dims: (usize, usize, usize),
    x: f64,
    y: f64,
    z: f64,
    fill: f64,
) -> (f64, f64, f64, f64) {
    let (d, h, w) = dims;
    let x0 = f64math::floor(x);
    let y0 = f64math::floor(y);
    let z0 = f64math::floor(z);
    let fx = x - x0;
    let fy = y - y0;
    let fz = z - z0;
    let at = |xi: i64, yi: i64, zi: i64| -> f64 {
        if xi < 0 || yi < 0 || zi < 0 || xi >= w as i64 || yi >= h as i64 || zi >= d as i64 {
            fill
        } else {
            moving.data[(zi as usize * h + yi as usize) * w + xi as usize].to_f64()
        }
    };
    let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
    let mut value = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    let mut dz = 0.0;
    for cz in 0..2i64 {
        let wz = if cz == 0 { 1.0 - fz } else { fz };
        let gz = if cz == 0 { -1.0 } else { 1.0 };
        for cy in 0..2i64 {
            let wy = if cy == 0 { 1.0 - fy } else { fy };
            let gy = if cy == 0 { -1.0 } else { 1.0 };
            for cx in 0..2i64 {
                let wx = if cx == 0 { 1.0 - fx } else { fx };
                let gx = if cx == 0 { -1.0 } else { 1.0 };
                let v = at(xi + cx, yi + cy, zi + cz);
                value += wx * wy * wz * v;
                dx += gx * wy * wz * v;
                dy += wx * gy * wz * v;
                dz += wx * wy * gz * v;
            }
        }
    }
    (value, dx, dy, dz)
}

/// Warps `moving` onto an atlas grid of `atlas_dims` = (depth, rows, cols)
/// under the constrained transform of the six raw parameters.
pub fn spatial_transform_3d<R: Real>(
    moving: &Tensor<R>,
    atlas_dims: (usize, usize, usize),
    raw: &[f64; 6],
    fill: f64,
) -> Result<Tensor<R>> {
    let dims = check_moving(moving)?;
    let (ad, ah, aw) = atlas_dims;
    if ad == 0 || ah == 0 || aw == 0 {
        return Err(CoreError::invalid("atlas grid must be nonempty"));
    }
    let m = compose_t3d(&constrain(raw));
    let (acx, acy, acz) = (centre(aw), centre(ah), centre(ad));
    let (mcx, mcy, mcz) = (centre(dims.2), centre(dims.1), centre(dims.0));
    let mut out = Tensor::zeros(&[ad, ah, aw]);
    for zz in 0..ad {
        for yy in 0..ah {
            for xx in 0..aw {
                let q = [xx as f64 - acx, yy as f64 - acy, zz as f64 - acz];
                let p = apply_t3d(&m, q);
                let (v, _, _, _) =
                    sample_with_grad(moving, dims, p[0] + mcx, p[1] + mcy, p[2] + mcz, fill);
                out.data[(zz * ah + yy) * aw + xx] = R::from_f64(v);
            }
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the six raw parameters, given
/// the loss gradient over the warped volume from the same forward call.
pub fn spatial_transform_3d_backward<R: Real>(
    moving: &Tensor<R>,
    atlas_dims: (usize, usize, usize),
    raw: &[f64; 6],
    fill: f64,
    dwarped: &Tensor<f64>,
) -> Result<[f64; 6]> {
    let dims = check_moving(moving)?;
    let (ad, ah, aw) = atlas_dims;
    if dwarped.shape != [ad, ah, aw] {
        return Err(CoreError::invalid("warp gradient shape mismatch"));
    }
    let params = constrain(raw);
    let m = compose_t3d(&params);
    let (sin, cos) = (f64math::sin(params.theta), f64math::cos(params.theta));
    let (acx, acy, acz) = (centre(aw), centre(ah), centre(ad));
    let (mcx, mcy, mcz) = (centre(dims.2), centre(dims.1), centre(dims.0));
    // Gradient in constrained parameter order (tx, ty, tz, theta, sxy, sz).
    let mut dp = [0.0f64; 6];
    for zz in 0..ad {
        for yy in 0..ah {
            for xx in 0..aw {
                let g = dwarped.data[(zz * ah + yy) * aw + xx];
                if g == 0.0 {
                    continue;
                }
                let q = [xx as f64 - acx, yy as f64 - acy, zz as f64 - acz];
                let p = apply_t3d(&m, q);
                let (_, vx, vy, vz) =
                    sample_with_grad(moving, dims, p[0] + mcx, p[1] + mcy, p[2] + mcz, fill);
                let (lx, ly, lz) = (g * vx, g * vy, g * vz);
                dp[0] += lx;
                dp[1] += ly;
                dp[2] += lz;
                // d(R S q)/dtheta = R' S q.
                let sqx = params.s_xy * q[0];
                let sqy = params.s_xy * q[1];
                dp[3] += lx * (-sin * sqx - cos * sqy) + ly * (cos * sqx - sin * sqy);
                // d(R S q)/ds_xy = R (qx, qy, 0).
                dp[4] += lx * (cos * q[0] - sin * q[1]) + ly * (sin * q[0] + cos * q[1]);
                // d(R S q)/ds_z = (0, 0, qz).
                dp[5] += lz * q[2];
            }
        }
    }
    let jac = constrain_jacobian(raw);
    let mut draw = [0.0f64; 6];
    for i in 0..6 {
        draw[i] = dp[i] * jac[i];
    }
    Ok(draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::loss::ncc_loss;

    /// Smooth test volume: sum of gaussian blobs, near zero at the border.
    fn blob_volume(d: usize, h: usize, w: usize, centres: &[(f64, f64, f64)]) -> Tensor<f64> {
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0f64;
                    for &(cx, cy, cz) in centres {
                        let r2 = (x as f64 - cx).powi(2)
                            + (y as f64 - cy).powi(2)
                            + (z as f64 - cz).powi(2);
                        v += (-r2 / 6.0).exp();
                    }
                    data.push(v);
                }
            }
        }
        Tensor::new(&[d, h, w], data).unwrap()
    }

    #[test]
    fn zero_raw_params_are_identity() {
        let vol = blob_volume(5, 6, 7, &[(3.0, 2.5, 2.0)]);
        let out = spatial_transform_3d(&vol, (5, 6, 7), &[0.0; 6], 0.0).unwrap();
        for (a, b) in out.data.iter().zip(vol.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn known_shift_aligns_with_atlas() {
        // Moving volume is the atlas blob displaced by (+2, +1, 0) voxels.
        let (d, h, w) = (9, 12, 12);
        let atlas = blob_volume(d, h, w, &[(5.5, 6.0, 4.0)]);
        let moving = blob_volume(d, h, w, &[(7.5, 7.0, 4.0)]);
        let warped =
            spatial_transform_3d(&moving, (d, h, w), &[2.0, 1.0, 0.0, 0.0, 0.0, 0.0], 0.0)
                .unwrap();
        let (loss, _) = ncc_loss(&warped, &atlas).unwrap();
        assert!(loss < -0.999, "alignment loss {loss}");
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let moving = blob_volume(7, 8, 9, &[(4.0, 3.5, 3.0), (6.2, 5.1, 4.4)]);
        let fixed = blob_volume(6, 7, 8, &[(3.6, 3.2, 2.6)]);
        let dims = (6usize, 7usize, 8usize);
        let raw = [0.31, -0.42, 0.21, 0.11, -0.23, 0.17];
        let fill = 0.0;
        let warped = spatial_transform_3d(&moving, dims, &raw, fill).unwrap();
        let (_, dwarped) = ncc_loss(&warped, &fixed).unwrap();
        let analytic =
            spatial_transform_3d_backward(&moving, dims, &raw, fill, &dwarped).unwrap();
        let hstep = 1e-3;
        for i in 0..6 {
            let mut rp = raw;
            rp[i] += hstep;
            let mut rm = raw;
            rm[i] -= hstep;
            let wp = spatial_transform_3d(&moving, dims, &rp, fill).unwrap();
            let wm = spatial_transform_3d(&moving, dims, &rm, fill).unwrap();
            let (lp, _) = ncc_loss(&wp, &fixed).unwrap();
            let (lm, _) = ncc_loss(&wm, &fixed).unwrap();
            let fd = (lp - lm) / (2.0 * hstep);
            let rel = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn fill_value_covers_outside_samples() {
        let vol = blob_volume(3, 3, 3, &[(1.0, 1.0, 1.0)]);
        // Large translation pushes every sample outside the moving volume.
        let out =
            spatial_transform_3d(&vol, (3, 3, 3), &[50.0, 0.0, 0.0, 0.0, 0.0, 0.0], -7.5)
                .unwrap();
        assert!(out.data.iter().all(|&v| (v + 7.5).abs() < 1e-12));
    }

    #[test]
    fn shape_checks() {
        let vol = blob_volume(3, 3, 3, &[(1.0, 1.0, 1.0)]);
        let bad = Tensor::<f64>::zeros(&[2, 2]);
        assert!(spatial_transform_3d(&bad, (3, 3, 3), &[0.0; 6], 0.0).is_err());
        assert!(spatial_transform_3d(&vol, (0, 3, 3), &[0.0; 6], 0.0).is_err());
        let dg = Tensor::<f64>::zeros(&[2, 3, 3]);
        assert!(spatial_transform_3d_backward(&vol, (3, 3, 3), &[0.0; 6], 0.0, &dg).is_err());
    }
}
