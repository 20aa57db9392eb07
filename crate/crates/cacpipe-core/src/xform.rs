//! Constrained rigid transforms: parameterization, matrix composition,
//! inversion, and axial slab selection.
//!
//! The registration model emits six unconstrained reals. [`constrain`] maps
//! them to a rigid transform with bounded rotation and scale:
//! translations pass through, the in-plane angle is `pi * tanh(r)`, and both
//! scales are `4^tanh(r)`, keeping scale in [1/4, 4] and symmetric in log
//! space. Matrices compose as translation * rotation * scale and act on
//! coordinates centred on the grid midpoint; callers add the half-extent
//! offsets when converting to array indices (see [`crate::volgrid`]).
//!
//! All matrices here are pull transforms: a point in the output (atlas-
//! aligned) frame is mapped to its sample location in the input frame.

use core::ops::Range;

use crate::error::{CoreError, Result};
use crate::real::f64math;

/// Rigid transform parameters: translation, in-plane rotation, and
/// anisotropic scale (shared in-plane factor, separate axial factor).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidParams {
    /// Translation (x, y, z), in the grid units of the volume it applies to.
    pub t: [f64; 3],
    /// In-plane rotation about the z axis, radians.
    pub theta: f64,
    /// In-plane scale factor.
    pub s_xy: f64,
    /// Axial scale factor.
    pub s_z: f64,
}

impl RigidParams {
    /// Identity transform.
    pub fn identity() -> Self {
        Self {
            t: [0.0; 3],
            theta: 0.0,
            s_xy: 1.0,
            s_z: 1.0,
        }
    }

    /// Validates finiteness and positive scales.
    pub fn validate(&self) -> Result<()> {
        let finite = self.t.iter().all(|v| v.is_finite())
            && self.theta.is_finite()
            && self.s_xy.is_finite()
            && self.s_z.is_finite();
        if !finite {
            return Err(CoreError::invalid("transform parameters must be finite"));
        }
        if !(self.s_xy > 0.0 && self.s_z > 0.0) {
            return Err(CoreError::invalid("scale factors must be positive"));
        }
        Ok(())
    }
}

/// Natural log of 4, the base of the scale constraint.
pub const LN_4: f64 = 1.3862943611198906;

/// Maps six raw regression outputs to constrained rigid parameters.
pub fn constrain(raw: &[f64; 6]) -> RigidParams {
    RigidParams {
        t: [raw[0], raw[1], raw[2]],
        theta: core::f64::consts::PI * f64math::tanh(raw[3]),
        s_xy: f64math::exp(LN_4 * f64math::tanh(raw[4])),
        s_z: f64math::exp(LN_4 * f64math::tanh(raw[5])),
    }
}

/// Diagonal Jacobian of [`constrain`]: d(param_i)/d(raw_i).
pub fn constrain_jacobian(raw: &[f64; 6]) -> [f64; 6] {
    let sech2 = |r: f64| {
        let t = f64math::tanh(r);
        1.0 - t * t
    };
    let s_xy = f64math::exp(LN_4 * f64math::tanh(raw[4]));
    let s_z = f64math::exp(LN_4 * f64math::tanh(raw[5]));
    [
        1.0,
        1.0,
        1.0,
        core::f64::consts::PI * sech2(raw[3]),
        LN_4 * s_xy * sech2(raw[4]),
        LN_4 * s_z * sech2(raw[5]),
    ]
}

/// Composes the 4x4 pull transform translation * rotation_z * scale.
///
/// Acting on a centred point q: T q = R_z S q + t.
pub fn compose_t3d(p: &RigidParams) -> [[f64; 4]; 4] {
    let c = f64math::cos(p.theta);
    let s = f64math::sin(p.theta);
    [
        [c * p.s_xy, -s * p.s_xy, 0.0, p.t[0]],
        [s * p.s_xy, c * p.s_xy, 0.0, p.t[1]],
        [0.0, 0.0, p.s_z, p.t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Composes the in-plane 3x3 pull transform from the planar components.
///
/// Uses translation (t_x, t_y), rotation theta, and scale s_xy; the axial
/// components are handled by slab selection instead.
pub fn compose_t2d(p: &RigidParams) -> [[f64; 3]; 3] {
    let c = f64math::cos(p.theta);
    let s = f64math::sin(p.theta);
    [
        [c * p.s_xy, -s * p.s_xy, p.t[0]],
        [s * p.s_xy, c * p.s_xy, p.t[1]],
        [0.0, 0.0, 1.0],
    ]
}

/// Applies a 3x3 homogeneous transform to a 2-D point.
pub fn apply_t2d(t: &[[f64; 3]; 3], x: f64, y: f64) -> (f64, f64) {
    (
        t[0][0] * x + t[0][1] * y + t[0][2],
        t[1][0] * x + t[1][1] * y + t[1][2],
    )
}

/// Applies a 4x4 homogeneous transform to a 3-D point.
pub fn apply_t3d(t: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, row) in t.iter().take(3).enumerate() {
        out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
    }
    out
}

/// Inverts a 3x3 homogeneous transform via the adjugate.
///
/// Errors if |det| < 1e-12.
pub fn invert_t2d(t: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = t[0][0] * (t[1][1] * t[2][2] - t[1][2] * t[2][1])
        - t[0][1] * (t[1][0] * t[2][2] - t[1][2] * t[2][0])
        + t[0][2] * (t[1][0] * t[2][1] - t[1][1] * t[2][0]);
    if f64math::abs(det) < 1e-12 {
        return Err(CoreError::geometry("transform is singular"));
    }
    let inv_det = 1.0 / det;
    let adj = |r0: usize, c0: usize, r1: usize, c1: usize| t[r0][c0] * t[r1][c1] - t[r0][c1] * t[r1][c0];
    Ok([
        [
            adj(1, 1, 2, 2) * inv_det,
            -adj(0, 1, 2, 2) * inv_det,
            adj(0, 1, 1, 2) * inv_det,
        ],
        [
            -adj(1, 0, 2, 2) * inv_det,
            adj(0, 0, 2, 2) * inv_det,
            -adj(0, 0, 1, 2) * inv_det,
        ],
        [
            adj(1, 0, 2, 1) * inv_det,
            -adj(0, 0, 2, 1) * inv_det,
            adj(0, 0, 1, 1) * inv_det,
        ],
    ])
}

/// Selects the axial slab of a volume that an atlas of axial extent `d_z`
/// slices maps onto, given the axial translation `t_z` (slab start, in slice
/// indices of the volume) and the axial scale `s_z` of the alignment.
///
/// The slab is [floor(t_z), ceil(t_z + d_z / s_z)) intersected with
/// [0, n_z); an empty intersection is an error.
pub fn select_slices(t_z: f64, d_z: f64, s_z: f64, n_z: usize) -> Result<Range<usize>> {
    if !(d_z > 0.0) || !(s_z > 0.0) {
        return Err(CoreError::invalid("slab extent and scale must be positive"));
    }
    if !t_z.is_finite() {
        return Err(CoreError::invalid("axial translation must be finite"));
    }
    let lo = f64math::floor(t_z) as i64;
    let hi = f64math::ceil(t_z + d_z / s_z) as i64;
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(n_z);
    if lo >= hi {
        return Err(CoreError::degenerate(
            "selected axial slab does not intersect the volume",
        ));
    }
    Ok(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn constrain_bounds_and_identity() {
        let p = constrain(&[0.0; 6]);
        assert_eq!(p.t, [0.0; 3]);
        assert_eq!(p.theta, 0.0);
        assert!((p.s_xy - 1.0).abs() < 1e-15);
        assert!((p.s_z - 1.0).abs() < 1e-15);

        let hi = constrain(&[5.0, -3.0, 2.0, 50.0, 50.0, -50.0]);
        assert_eq!(hi.t, [5.0, -3.0, 2.0]);
        assert!((hi.theta - PI).abs() < 1e-9);
        assert!((hi.s_xy - 4.0).abs() < 1e-9);
        assert!((hi.s_z - 0.25).abs() < 1e-9);
    }

    #[test]
    fn constrain_jacobian_matches_finite_differences() {
        let raws = [
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, -2.0, 0.5, 0.3, -0.7, 1.2],
            [-0.1, 0.2, -0.3, -1.5, 0.9, -0.4],
        ];
        let h = 1e-6;
        for raw in raws {
            let jac = constrain_jacobian(&raw);
            for i in 0..6 {
                let mut plus = raw;
                plus[i] += h;
                let mut minus = raw;
                minus[i] -= h;
                let pp = constrain(&plus);
                let pm = constrain(&minus);
                let vals_p = [pp.t[0], pp.t[1], pp.t[2], pp.theta, pp.s_xy, pp.s_z];
                let vals_m = [pm.t[0], pm.t[1], pm.t[2], pm.theta, pm.s_xy, pm.s_z];
                let fd = (vals_p[i] - vals_m[i]) / (2.0 * h);
                assert!(
                    (fd - jac[i]).abs() < 1e-7,
                    "component {i}: fd {fd} vs analytic {}",
                    jac[i]
                );
            }
        }
    }

    #[test]
    fn compose_t3d_known_point() {
        let p = RigidParams {
            t: [1.0, 2.0, 3.0],
            theta: PI / 2.0,
            s_xy: 2.0,
            s_z: 0.5,
        };
        let t = compose_t3d(&p);
        // q = (1, 0, 4): scale -> (2, 0, 2), rotate 90 -> (0, 2, 2),
        // translate -> (1, 4, 5).
        let out = apply_t3d(&t, [1.0, 0.0, 4.0]);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 4.0).abs() < 1e-12);
        assert!((out[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn compose_t2d_matches_t3d_plane() {
        let p = RigidParams {
            t: [0.5, -1.5, 9.0],
            theta: 0.3,
            s_xy: 1.2,
            s_z: 2.0,
        };
        let t3 = compose_t3d(&p);
        let t2 = compose_t2d(&p);
        for (x, y) in [(0.0, 0.0), (1.0, 2.0), (-3.0, 0.7)] {
            let a = apply_t3d(&t3, [x, y, 0.0]);
            let b = apply_t2d(&t2, x, y);
            assert!((a[0] - b.0).abs() < 1e-12);
            assert!((a[1] - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_t2d_roundtrip() {
        let p = RigidParams {
            t: [3.0, -2.0, 0.0],
            theta: 0.7,
            s_xy: 1.7,
            s_z: 1.0,
        };
        let t = compose_t2d(&p);
        let inv = invert_t2d(&t).unwrap();
        for (x, y) in [(0.0, 0.0), (5.0, -4.0), (0.25, 10.0)] {
            let (fx, fy) = apply_t2d(&t, x, y);
            let (bx, by) = apply_t2d(&inv, fx, fy);
            assert!((bx - x).abs() < 1e-10);
            assert!((by - y).abs() < 1e-10);
        }
    }

    #[test]
    fn invert_t2d_rejects_singular() {
        let t = [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(invert_t2d(&t).is_err());
    }

    #[test]
    fn select_slices_formula() {
        // floor(2.3) = 2, ceil(2.3 + 10/1) = ceil(12.3) = 13.
        assert_eq!(select_slices(2.3, 10.0, 1.0, 20).unwrap(), 2..13);
        // Axial scale shrinks the slab: ceil(2.3 + 10/2) = 8.
        assert_eq!(select_slices(2.3, 10.0, 2.0, 20).unwrap(), 2..8);
        // Scale below one grows it; clamp at n_z.
        assert_eq!(select_slices(2.3, 10.0, 0.5, 20).unwrap(), 2..20);
        // Negative start clamps to zero.
        assert_eq!(select_slices(-3.7, 6.0, 1.0, 20).unwrap(), 0..3);
        // Integer start stays inclusive, integer end exclusive.
        assert_eq!(select_slices(4.0, 8.0, 1.0, 20).unwrap(), 4..12);
    }

    #[test]
    fn select_slices_empty_is_error() {
        assert!(select_slices(30.0, 5.0, 1.0, 20).is_err());
        assert!(select_slices(-20.0, 5.0, 1.0, 20).is_err());
        assert!(select_slices(0.0, 0.0, 1.0, 20).is_err());
        assert!(select_slices(0.0, 5.0, -1.0, 20).is_err());
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut p = RigidParams::identity();
        assert!(p.validate().is_ok());
        p.s_xy = 0.0;
        assert!(p.validate().is_err());
        p.s_xy = 1.0;
        p.theta = f64::NAN;
        assert!(p.validate().is_err());
    }
}
