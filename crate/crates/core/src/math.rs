//! Small numeric helpers shared across modules: quaternions stored as
//! `(w, x, y, z)` vectors, logistic activations, and camera pose algebra.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};

pub type Quat = Vector4<f64>;

pub const QUAT_IDENTITY: Quat = Quat::new(1.0, 0.0, 0.0, 0.0);

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    q / q.norm()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_rotate(q: &Quat, v: &Vector3<f64>) -> Vector3<f64> {
    quat_to_matrix(q) * v
}

/// Shortest-arc unit quaternion rotating the +y axis onto `target`
/// (`target` need not be normalized). Identity when `target` is already
/// along +y; undefined (returns identity) when exactly opposite.
pub fn quat_from_y_to(target: &Vector3<f64>) -> Quat {
    let n = target.norm();
    // Unnormalized shortest-arc form: (n + t_y, t × contribution of ŷ).
    // axis = ŷ × t = (t_z, 0, -t_x).
    let q = Quat::new(n + target.y, target.z, 0.0, -target.x);
    let qn = q.norm();
    if qn < 1e-12 * n.max(1.0) {
        // target anti-parallel to +y; pick a fixed 180 degree rotation.
        return Quat::new(0.0, 1.0, 0.0, 0.0);
    }
    q / qn
}

/// Derivative of `quat_to_matrix` entries w.r.t. the four raw quaternion
/// components, contracted with an upstream gradient `d_rot`.
/// Assumes the matrix was built from the *normalized* quaternion; the
/// normalization chain itself is applied by [`quat_normalize_backward`].
pub fn quat_to_matrix_backward(q: &Quat, d_rot: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = d_rot;
    // dR/dw
    let dw = 2.0
        * (g[(0, 1)] * (-z) + g[(0, 2)] * y + g[(1, 0)] * z + g[(1, 2)] * (-x)
            + g[(2, 0)] * (-y)
            + g[(2, 1)] * x);
    // dR/dx
    let dx = 2.0
        * (g[(0, 1)] * y + g[(0, 2)] * z + g[(1, 0)] * y + g[(1, 1)] * (-2.0 * x)
            + g[(1, 2)] * (-w)
            + g[(2, 0)] * z
            + g[(2, 1)] * w
            + g[(2, 2)] * (-2.0 * x));
    // dR/dy
    let dy = 2.0
        * (g[(0, 0)] * (-2.0 * y) + g[(0, 1)] * x + g[(0, 2)] * w + g[(1, 0)] * x
            + g[(1, 2)] * z
            + g[(2, 0)] * (-w)
            + g[(2, 1)] * z
            + g[(2, 2)] * (-2.0 * y));
    // dR/dz
    let dz = 2.0
        * (g[(0, 0)] * (-2.0 * z) + g[(0, 1)] * (-w) + g[(0, 2)] * x + g[(1, 0)] * w
            + g[(1, 1)] * (-2.0 * z)
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    Quat::new(dw, dx, dy, dz)
}

/// Chain an upstream gradient w.r.t. a *unit* quaternion back to the raw
/// (unnormalized) stored components: `d_raw = (I - q̂ q̂ᵀ) / |q| · d_unit`.
pub fn quat_normalize_backward(raw: &Quat, d_unit: &Quat) -> Quat {
    let n = raw.norm();
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Max abs deviation of RᵀR from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotate a direction from camera frame into world frame.
    pub fn dir_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &nalgebra::Matrix4<f64>) -> Self {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Project a camera-frame point (z > 0) to continuous pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Camera-frame ray direction through a continuous pixel coordinate,
    /// scaled so the z component is 1 (parameter t equals camera-frame depth).
    pub fn ray_dir(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Back-project a continuous pixel at camera-frame depth z.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.ray_dir(pixel) * depth
    }

    /// Angle between the pixel ray and the optical axis.
    pub fn ray_angle(&self, pixel: &Vector2<f64>) -> f64 {
        let d = self.ray_dir(pixel);
        (d.xy().norm() / d.z).atan()
    }
}

/// Center of an integer pixel in continuous coordinates.
pub fn pixel_center(u: usize, v: usize) -> Vector2<f64> {
    Vector2::new(u as f64 + 0.5, v as f64 + 0.5)
}
