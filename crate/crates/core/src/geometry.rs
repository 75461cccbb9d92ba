//! Pinhole cameras, rays and the radial scene contraction.
//!
//! Camera frame convention: x right, y up, the camera looks along −z. Pixel `(i, j)` is
//! row `i`, column `j`; rays pass through the pixel centre `(j + 0.5, i + 0.5)`.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }
    pub fn y(self) -> f64 {
        self.0[1]
    }
    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3(self.0.map(f))
    }

    pub fn to_f32(self) -> [f32; 3] {
        self.0.map(|v| v as f32)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2])
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.map(|v| -v)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.map(|v| v * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        self.map(|v| v / s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[r][k] * o.0[k][c]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3([
            [t * a[0] * a[0] + c, t * a[0] * a[1] - s * a[2], t * a[0] * a[2] + s * a[1]],
            [t * a[0] * a[1] + s * a[2], t * a[1] * a[1] + c, t * a[1] * a[2] - s * a[0]],
            [t * a[0] * a[2] - s * a[1], t * a[1] * a[2] + s * a[0], t * a[2] * a[2] + c],
        ])
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        let prod = self.mul_mat(&self.transpose());
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                if (prod.0[r][c] - expect).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major rigid transform from camera to world coordinates.
    pub camera_to_world: [[f64; 4]; 4],
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        camera_to_world: [[f64; 4]; 4],
        focal_x: f64,
        focal_y: f64,
        principal_point: (f64, f64),
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            camera_to_world,
            focal_x,
            focal_y,
            principal_point,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, principal point at the image centre.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("look_at: up vector parallel to view direction".into()));
        }
        let right = right.normalized();
        let true_up = right.cross(forward);
        let rot = Mat3::from_columns(right, true_up, -forward);
        Camera::new(
            compose_rigid(&rot, eye),
            focal,
            focal,
            (width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera dimensions must be at least 1".into()));
        }
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !self.rotation().is_rotation(1e-5) {
            return Err(Error::InvalidInput("camera rotation is not orthonormal with det +1".into()));
        }
        let m = &self.camera_to_world;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("camera transform is not finite".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.camera_to_world;
        Mat3([
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ])
    }

    pub fn origin(&self) -> Vec3 {
        let m = &self.camera_to_world;
        Vec3::new(m[0][3], m[1][3], m[2][3])
    }

    pub fn translated(&self, v: Vec3) -> Camera {
        let mut cam = self.clone();
        for (r, row) in cam.camera_to_world.iter_mut().take(3).enumerate() {
            row[3] += v[r];
        }
        cam
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            camera_to_world: self.camera_to_world,
            focal_x: self.focal_x * sx,
            focal_y: self.focal_y * sy,
            principal_point: (self.principal_point.0 * sx, self.principal_point.1 * sy),
            width,
            height,
        }
    }

    /// Projects a world point to continuous image coordinates `(row, col)`; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.rotation().transpose().mul_vec(p - self.origin());
        if local.z() >= 0.0 {
            return None;
        }
        let depth = -local.z();
        let col = self.principal_point.0 + self.focal_x * local.x() / depth;
        let row = self.principal_point.1 - self.focal_y * local.y() / depth;
        Some((row, col))
    }

    pub fn pixel_direction(&self, row: f64, col: f64) -> Vec3 {
        let local = Vec3::new(
            (col - self.principal_point.0) / self.focal_x,
            -(row - self.principal_point.1) / self.focal_y,
            -1.0,
        );
        self.rotation().mul_vec(local).normalized()
    }
}

pub fn compose_rigid(rot: &Mat3, translation: Vec3) -> [[f64; 4]; 4] {
    let r = &rot.0;
    [
        [r[0][0], r[0][1], r[0][2], translation[0]],
        [r[1][0], r[1][1], r[1][2], translation[1]],
        [r[2][0], r[2][1], r[2][2], translation[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_near >= 0.0 && self.t_near < self.t_far) || !self.t_far.is_finite() {
            return Err(Error::InvalidInput(format!(
                "degenerate ray interval [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput("ray direction is not unit length".into()));
        }
        Ok(())
    }
}

/// Near plane and sampling ball used to clip rays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayBounds {
    pub near: f64,
    /// Radius of the world-space ball rays are clipped to.
    pub radius: f64,
}

impl Default for RayBounds {
    fn default() -> Self {
        RayBounds { near: 0.05, radius: 2.0 }
    }
}

impl RayBounds {
    /// `[t_near, t_far]` of the chord through the sampling ball, starting no closer than `near`.
    ///
    /// Rays that miss the ball get a segment of length `2 * radius` from `near` so they stay
    /// renderable; they only see clamped encodings there.
    pub fn clip(&self, origin: Vec3, direction: Vec3) -> (f64, f64) {
        let b = origin.dot(direction);
        let c = origin.norm_sq() - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return (self.near, self.near + 2.0 * self.radius);
        }
        let s = disc.sqrt();
        let t0 = (-b - s).max(self.near);
        let t1 = -b + s;
        if t1 <= t0 {
            return (self.near, self.near + 2.0 * self.radius);
        }
        (t0, t1)
    }
}

/// Ray through the centre of pixel `(row, col)`.
pub fn generate_ray(camera: &Camera, row: usize, col: usize, bounds: &RayBounds) -> Result<Ray> {
    if row >= camera.height || col >= camera.width {
        return Err(Error::InvalidInput(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            camera.height, camera.width
        )));
    }
    let direction = camera.pixel_direction(row as f64 + 0.5, col as f64 + 0.5);
    let origin = camera.origin();
    let (t_near, t_far) = bounds.clip(origin, direction);
    Ok(Ray {
        origin,
        direction,
        t_near,
        t_far,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionConfig {
    pub inner_radius: f64,
    pub outer_bound: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig {
            inner_radius: 1.0,
            outer_bound: 2.0,
        }
    }
}

impl ContractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_bound) {
            return Err(Error::Config("contraction requires 0 < inner_radius < outer_bound".into()));
        }
        Ok(())
    }

    /// Identity inside the inner ball, radial `outer - (outer - inner) * inner / |x|` outside.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        let n = x.norm();
        if n <= self.inner_radius {
            return x;
        }
        let r = self.outer_bound - (self.outer_bound - self.inner_radius) * self.inner_radius / n;
        x * (r / n)
    }
}

/// Unit-ball contraction into the radius-2 ball: `(2 - 1/|x|) x/|x|` outside the unit ball.
pub fn contract(x: Vec3) -> Vec3 {
    ContractionConfig::default().apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera(size: usize, focal: f64) -> Camera {
        Camera::new(
            compose_rigid(&Mat3::IDENTITY, Vec3::ZERO),
            focal,
            focal,
            (size as f64 / 2.0, size as f64 / 2.0),
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn centre_pixel_looks_down_negative_z() {
        // with an odd-sized image the centre pixel's centre sits on the principal point
        let cam = Camera::new(compose_rigid(&Mat3::IDENTITY, Vec3::ZERO), 10.0, 10.0, (1.5, 1.5), 3, 3).unwrap();
        let ray = generate_ray(&cam, 1, 1, &RayBounds::default()).unwrap();
        assert!((ray.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn translation_moves_origin_only() {
        let cam = identity_camera(16, 20.0);
        let v = Vec3::new(0.3, -1.2, 0.7);
        let a = generate_ray(&cam, 3, 11, &RayBounds::default()).unwrap();
        let b = generate_ray(&cam.translated(v), 3, 11, &RayBounds::default()).unwrap();
        assert_eq!(b.origin, a.origin + v);
        assert_eq!(b.direction, a.direction);
    }

    #[test]
    fn corner_pixel_round_trips_through_projection() {
        let cam = identity_camera(64, 64.0);
        let ray = generate_ray(&cam, 0, 0, &RayBounds::default()).unwrap();
        // point at unit depth along the optical axis
        let t = 1.0 / (-ray.direction.z());
        let (row, col) = cam.project(ray.origin + ray.direction * t).unwrap();
        assert!((row - 0.5).abs() < 1e-9 && (col - 0.5).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = identity_camera(8, 8.0);
        assert!(matches!(generate_ray(&cam, 8, 0, &RayBounds::default()), Err(Error::InvalidInput(_))));
        assert!(generate_ray(&cam, 0, 8, &RayBounds::default()).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut m = compose_rigid(&Mat3::IDENTITY, Vec3::ZERO);
        m[0][0] = 1.01;
        assert!(Camera::new(m, 1.0, 1.0, (0.5, 0.5), 1, 1).is_err());
        let mirror = Mat3([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(Camera::new(compose_rigid(&mirror, Vec3::ZERO), 1.0, 1.0, (0.5, 0.5), 1, 1).is_err());
    }

    #[test]
    fn ray_clipped_to_sampling_ball() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 50.0, 9, 9).unwrap();
        let ray = generate_ray(&cam, 4, 4, &RayBounds::default()).unwrap();
        assert!((ray.t_near - 1.0).abs() < 1e-9);
        assert!((ray.t_far - 5.0).abs() < 1e-9);
        ray.validate().unwrap();
    }

    #[test]
    fn contraction_examples() {
        assert_eq!(contract(Vec3::new(0.3, 0.0, 0.0)), Vec3::new(0.3, 0.0, 0.0));
        assert!((contract(Vec3::new(2.0, 0.0, 0.0)) - Vec3::new(1.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn contraction_bounded_and_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if dir.norm() < 1e-6 {
                continue;
            }
            let mag = 10f64.powf(rng.random_range(-3.0..6.0));
            assert!(contract(dir.normalized() * mag).norm() < 2.0);
        }
        let u = Vec3::new(0.6, 0.0, 0.8);
        let inside = contract(u * (1.0 - 1e-9));
        let outside = contract(u * (1.0 + 1e-9));
        assert!((inside - outside).norm() < 1e-6);
    }

    #[test]
    fn contraction_is_injective_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| {
                Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))
            })
            .collect();
        let mut mapped: Vec<Vec3> = pts.iter().map(|p| contract(*p)).collect();
        mapped.sort_by(|a, b| a.x().partial_cmp(&b.x()).unwrap());
        for w in 0..mapped.len() {
            for v in (w + 1)..mapped.len() {
                if mapped[v].x() - mapped[w].x() > 1e-9 {
                    break;
                }
                assert!((mapped[v] - mapped[w]).norm() > 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn pixel_centres_round_trip(row in 0usize..48, col in 0usize..64, yaw in -3.0f64..3.0, dist in 2.0f64..5.0) {
            let eye = Vec3::new(dist * yaw.cos(), 0.7, dist * yaw.sin());
            let cam = Camera::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 55.0, 64, 48).unwrap();
            let ray = generate_ray(&cam, row, col, &RayBounds::default()).unwrap();
            let (r, c) = cam.project(ray.at(1.7)).unwrap();
            prop_assert!((r - (row as f64 + 0.5)).abs() < 1e-4);
            prop_assert!((c - (col as f64 + 0.5)).abs() < 1e-4);
        }
    }
}
