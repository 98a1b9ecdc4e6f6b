//! Pinhole cameras on an orbit around the object.
//!
//! Conventions: right-handed world with +y up; in camera space the camera
//! looks down -z with +x right and +y up; image rows grow downward. The
//! rotation maps world directions to camera directions.

use glam::{DMat3, DVec3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation; rows are the camera x, y, z axes in world space.
    pub rotation: DMat3,
    pub position: DVec3,
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: DMat3,
        position: DVec3,
        focal_px: f64,
        principal_point: [f64; 2],
        (width, height): (usize, usize),
    ) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - DMat3::IDENTITY)
            .to_cols_array()
            .iter()
            .all(|v| v.abs() < 1e-6);
        if !ortho {
            return Err(Error::InvalidInput(
                "camera rotation is not orthonormal".into(),
            ));
        }
        if !(focal_px > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "camera needs positive focal length and image size".into(),
            ));
        }
        Ok(Camera {
            rotation,
            position,
            focal_px,
            principal_point,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Viewing direction (camera -z) in world space.
    pub fn forward(&self) -> DVec3 {
        -self.rotation.row(2)
    }

    /// Orbit azimuth in degrees `[0, 360)`, measured from +z toward +x.
    pub fn azimuth_deg(&self) -> f64 {
        let back = -self.forward();
        back.x.atan2(back.z).to_degrees().rem_euclid(360.0)
    }

    #[inline]
    pub fn world_to_camera(&self, v: DVec3) -> DVec3 {
        self.rotation * v
    }

    #[inline]
    pub fn camera_to_world(&self, v: DVec3) -> DVec3 {
        self.rotation.transpose() * v
    }

    /// Unit world-space direction through the center of pixel `(px, py)`.
    pub fn ray_dir(&self, px: usize, py: usize) -> DVec3 {
        let x = (px as f64 + 0.5 - self.principal_point[0]) / self.focal_px;
        let y = -(py as f64 + 0.5 - self.principal_point[1]) / self.focal_px;
        self.camera_to_world(DVec3::new(x, y, -1.0).normalize())
    }

    /// Pixel coordinates of a world point, or `None` when it is behind the camera.
    pub fn project(&self, p: DVec3) -> Option<[f64; 2]> {
        let c = self.world_to_camera(p - self.position);
        (c.z < 0.0).then(|| {
            [
                self.principal_point[0] + self.focal_px * c.x / -c.z,
                self.principal_point[1] - self.focal_px * c.y / -c.z,
            ]
        })
    }
}

/// Camera on a sphere of `radius` around `target`, looking at it with +y up.
/// Azimuth 0 and elevation 0 put the camera on +z.
pub fn orbit_camera(
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    target: DVec3,
    (width, height): (usize, usize),
    fov_deg: f64,
) -> Result<Camera> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "orbit radius must be positive, got {radius}"
        )));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidInput(format!(
            "fov must be in (0, 180), got {fov_deg}"
        )));
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let offset = DVec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * radius;
    let position = target + offset;
    if (position - target).length() <= f64::EPSILON * radius.max(1.0) {
        return Err(Error::InvalidInput(
            "camera position coincides with target".into(),
        ));
    }
    let z = (position - target).normalize();
    let mut x = DVec3::Y.cross(z);
    if x.length() < 1e-9 {
        // looking straight up or down; keep azimuth 0 screen orientation
        x = DVec3::new(az.cos(), 0.0, -az.sin());
    }
    let x = x.normalize();
    let y = z.cross(x);
    let rotation = DMat3::from_cols(x, y, z).transpose();
    let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    Camera::new(
        rotation,
        position,
        focal,
        [width as f64 / 2.0, height as f64 / 2.0],
        (width, height),
    )
}

/// `count` cameras at azimuths `start + k * step`, all at the same elevation.
pub fn camera_ring(
    count: usize,
    step_deg: f64,
    elevation_deg: f64,
    radius: f64,
    target: DVec3,
    size: (usize, usize),
    fov_deg: f64,
) -> Result<Vec<Camera>> {
    (0..count)
        .map(|k| {
            orbit_camera(
                k as f64 * step_deg,
                elevation_deg,
                radius,
                target,
                size,
                fov_deg,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_orbit_frame() {
        let c = orbit_camera(0.0, 0.0, 2.0, DVec3::ZERO, (64, 48), 40.0).unwrap();
        assert!((c.position - DVec3::new(0.0, 0.0, 2.0)).length() < 1e-12);
        assert!((c.forward() - DVec3::new(0.0, 0.0, -1.0)).length() < 1e-12);
        assert!(c.azimuth_deg().abs() < 1e-9);

        let back = orbit_camera(180.0, 0.0, 2.0, DVec3::ZERO, (64, 48), 40.0).unwrap();
        assert!((back.position - DVec3::new(0.0, 0.0, -2.0)).length() < 1e-12);
        assert!((back.forward() - DVec3::new(0.0, 0.0, 1.0)).length() < 1e-12);
        assert!((back.azimuth_deg() - 180.0).abs() < 1e-9);
    }

    #[test]
    fn focal_from_fov() {
        let c = orbit_camera(30.0, 10.0, 3.0, DVec3::ONE, (512, 512), 90.0).unwrap();
        assert!((c.focal_px - 256.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_orbits() {
        assert!(orbit_camera(0.0, 0.0, 0.0, DVec3::ZERO, (8, 8), 40.0).is_err());
        assert!(orbit_camera(0.0, 0.0, 1.0, DVec3::ZERO, (8, 8), 180.0).is_err());
        assert!(orbit_camera(0.0, 90.0, 1.0, DVec3::ZERO, (8, 8), 40.0).is_ok());
    }

    #[test]
    fn rays_project_back_to_their_pixel() {
        let c = orbit_camera(123.0, -20.0, 2.5, DVec3::new(0.1, 0.2, 0.3), (40, 30), 50.0).unwrap();
        assert!((c.rotation * c.rotation.transpose() - DMat3::IDENTITY)
            .to_cols_array()
            .iter()
            .all(|v| v.abs() < 1e-12));
        for (px, py) in [(0, 0), (39, 29), (17, 4)] {
            let p = c.position + c.ray_dir(px, py) * 1.7;
            let uv = c.project(p).unwrap();
            assert!((uv[0] - (px as f64 + 0.5)).abs() < 1e-9);
            assert!((uv[1] - (py as f64 + 0.5)).abs() < 1e-9);
        }
        // image y grows downward: top row looks up
        assert!(c.world_to_camera(c.ray_dir(20, 0)).y > 0.0);
    }
}
