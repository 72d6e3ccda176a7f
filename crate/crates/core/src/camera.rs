//! Camera pose and pinhole intrinsics.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::gaussian::GeometryError;

/// Rigid world→camera transform: p_c = R p_w + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    /// Validates orthonormality (RᵀR = I, det = +1 within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("camera pose"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidArgument("rotation is not special orthogonal"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn world_to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    pub fn camera_to_world(&self, p_camera: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_camera - self.translation)
    }
}

/// Pinhole projection parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 || width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument("focal lengths and dimensions must be positive"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-space point (z > 0) to pixel coordinates.
    pub fn project(&self, p_camera: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_camera.x / p_camera.z + self.cx,
            self.fy * p_camera.y / p_camera.z + self.cy,
        )
    }

    /// Back-projects a pixel at the given depth into camera space.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Jacobian of the pinhole map at a camera-space point.
    pub fn jacobian(&self, p_camera: &Vector3<f64>) -> Matrix2x3<f64> {
        let z_inv = 1.0 / p_camera.z;
        let z_inv2 = z_inv * z_inv;
        Matrix2x3::new(
            self.fx * z_inv, 0.0, -self.fx * p_camera.x * z_inv2,
            0.0, self.fy * z_inv, -self.fy * p_camera.y * z_inv2,
        )
    }
}
