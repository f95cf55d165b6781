//! Euler-angle convention: intrinsic Z-Y-X in degrees, `R = Rz * Ry * Rx`.
//!
//! With `cz = cos z` etc., the composed matrix is
//! ```text
//! [ cz*cy   cz*sy*sx - sz*cx   cz*sy*cx + sz*sx ]
//! [ sz*cy   sz*sy*sx + cz*cx   sz*sy*cx - cz*sx ]
//! [ -sy     cy*sx              cy*cx            ]
//! ```
//! so extraction reads `y = asin(-R20)`, `z = atan2(R10, R00)`,
//! `x = atan2(R21, R22)` away from gimbal lock. At `y = ±90°` only the sum
//! or difference of `z` and `x` is observable; the tie-break fixes `x = 0`
//! and reads `z = atan2(-R01, R11)`.

use nalgebra::Matrix3;

/// Intrinsic Z-Y-X rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub z_deg: f64,
    pub y_deg: f64,
    pub x_deg: f64,
}

impl EulerAngles {
    pub fn new(z_deg: f64, y_deg: f64, x_deg: f64) -> Self {
        EulerAngles { z_deg, y_deg, x_deg }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z_deg, self.y_deg, self.x_deg]
    }
}

pub fn euler_to_rotation(e: &EulerAngles) -> Matrix3<f64> {
    let (sz, cz) = e.z_deg.to_radians().sin_cos();
    let (sy, cy) = e.y_deg.to_radians().sin_cos();
    let (sx, cx) = e.x_deg.to_radians().sin_cos();
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    rz * ry * rx
}

/// How close `|R20|` must be to 1 before the gimbal-lock branch engages.
const GIMBAL_EPS: f64 = 1e-9;

/// Decomposes a rotation into Z-Y-X angles. The flag is true when the
/// middle angle sits at ±90° and the tie-break (`x = 0`) was applied.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> (EulerAngles, bool) {
    let m20 = r[(2, 0)].clamp(-1.0, 1.0);
    let y = (-m20).asin();
    if 1.0 - m20.abs() < GIMBAL_EPS {
        let z = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (
            EulerAngles::new(z.to_degrees(), y.to_degrees(), 0.0),
            true,
        )
    } else {
        let z = r[(1, 0)].atan2(r[(0, 0)]);
        let x = r[(2, 1)].atan2(r[(2, 2)]);
        (
            EulerAngles::new(z.to_degrees(), y.to_degrees(), x.to_degrees()),
            false,
        )
    }
}
