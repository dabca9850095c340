//! Rigid poses, pinhole intrinsics, projection and viewing rays.
//!
//! Conventions used everywhere in the crate:
//!
//! * poses map world to camera, `Xc = R·X + t`;
//! * right-handed frames, the camera looks along `+Z`;
//! * pixel origin top-left, `+u` right, `+v` down;
//! * images are undistorted.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (camera depth {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

fn orthonormal_tolerance<T: Real>() -> T {
    let eps = T::default_epsilon() * T::lit(100.0);
    if eps > T::lit(1e-9) {
        eps
    } else {
        T::lit(1e-9)
    }
}

/// Rigid world→camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D<T: Real = f64> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose6D<T> {
    /// Builds a pose, validating `RᵀR = I` and `det R = +1`.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeometryError> {
        let tol = orthonormal_tolerance::<T>();
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > tol || (rotation.determinant() - T::one()).abs() > tol {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose from an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(rotation_vector: Vector3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(rotation_vector).into_inner(),
            translation,
        }
    }

    /// Camera pose placed at `eye` looking at `target`, with image `-v`
    /// roughly along `up`.
    pub fn look_at(eye: Vector3<T>, target: Vector3<T>, up: Vector3<T>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    /// Maps a world point into the camera frame.
    #[inline]
    pub fn transform(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation * point + self.translation
    }

    /// Maps a camera-frame point back into the world frame.
    #[inline]
    pub fn inverse_transform(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation.transpose() * (point - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn camera_center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Left-composed increment: `R ← exp(ω)·R`, `t ← t + δt`.
    pub fn perturbed(&self, omega: &Vector3<T>, delta_t: &Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(*omega).into_inner() * self.rotation,
            translation: self.translation + delta_t,
        }
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Self) -> T {
        let rel = self.rotation.transpose() * other.rotation;
        let c = (rel.trace() - T::one()) * T::lit(0.5);
        let c = if c > T::one() {
            T::one()
        } else if c < -T::one() {
            -T::one()
        } else {
            c
        };
        c.acos()
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < T::zero() {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Pose6D<U> {
        Pose6D {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

impl<T: Real> Default for Pose6D<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pinhole intrinsics of an undistorted camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real = f64> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// True when the pixel lies inside `[0, width) × [0, height)`.
    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero()
            && pixel.y >= T::zero()
            && pixel.x < T::lit(self.width as f64)
            && pixel.y < T::lit(self.height as f64)
    }

    pub fn diagonal(&self) -> T {
        T::lit((self.width as f64).hypot(self.height as f64))
    }

    /// Projects a camera-frame point with positive depth.
    #[inline]
    pub fn project_camera(&self, pc: &Vector3<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Normalized camera ray `((u−cx)/fx, (v−cy)/fy, 1)`.
    #[inline]
    pub fn unproject(&self, pixel: &Vector2<T>) -> Vector3<T> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            T::one(),
        )
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Half-line in world coordinates with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T: Real = f64> {
    pub origin: Vector3<T>,
    pub direction: Vector3<T>,
}

impl<T: Real> Ray<T> {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<T>, direction: Vector3<T>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, distance: T) -> Vector3<T> {
        self.origin + self.direction * distance
    }

    /// Euclidean distance from `point` to the supporting line.
    pub fn distance_to_point(&self, point: &Vector3<T>) -> T {
        let d = point - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

/// Projects a world point to pixel coordinates. The result may fall outside
/// the image.
pub fn project<T: Real>(
    point: &Vector3<T>,
    pose: &Pose6D<T>,
    k: &Intrinsics<T>,
) -> Result<Vector2<T>, GeometryError> {
    let pc = pose.transform(point);
    if pc.z <= T::zero() {
        return Err(GeometryError::BehindCamera(pc.z.as_f64()));
    }
    Ok(k.project_camera(&pc))
}

/// World point at camera depth `depth` (along +Z) behind `pixel`.
pub fn backproject<T: Real>(
    pixel: &Vector2<T>,
    depth: T,
    pose: &Pose6D<T>,
    k: &Intrinsics<T>,
) -> Result<Vector3<T>, GeometryError> {
    if !(depth > T::zero()) {
        return Err(GeometryError::NonPositiveDepth(depth.as_f64()));
    }
    let pc = k.unproject(pixel) * depth;
    Ok(pose.inverse_transform(&pc))
}

/// Viewing ray through `pixel`, starting at the camera center.
pub fn pixel_ray<T: Real>(pixel: &Vector2<T>, pose: &Pose6D<T>, k: &Intrinsics<T>) -> Ray<T> {
    let dir = pose.rotation.transpose() * k.unproject(pixel);
    Ray::new(pose.camera_center(), dir)
}

/// Skew-symmetric cross-product matrix.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}
