use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Ray;

/// Pinhole camera: `x` right, `y` down, `z` forward in camera space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera `[R | t]`, row-major.
    pub pose: [[f64; 4]; 3],
}

impl Camera {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize, pose: [[f64; 4]; 3]) -> Result<Self> {
        if !(focal > 0.0) || width == 0 || height == 0 {
            return Err(Error::Invalid(format!("bad intrinsics: focal {focal}, {width}x{height}")));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| pose[k][i] * pose[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "pose rotation is not orthonormal (column {i}·{j} = {dot})"
                    )));
                }
            }
        }
        Ok(Self {
            focal,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly toward image top.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize(sub(target, eye))?;
        let right = normalize(cross(forward, up))?;
        let down = cross(forward, right);
        let mut pose = [[0.0; 4]; 3];
        for k in 0..3 {
            pose[k] = [right[k], down[k], forward[k], eye[k]];
        }
        Self::new(focal, width as f64 / 2.0, height as f64 / 2.0, width, height, pose)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize, near: f64, far: f64) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::Invalid(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let cam = [
            (px as f64 + 0.5 - self.cx) / self.focal,
            (py as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ];
        let world: [f64; 3] = std::array::from_fn(|k| (0..3).map(|j| self.pose[k][j] * cam[j]).sum());
        Ray::new(self.center(), normalize(world)?, near, far)
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, point: [f64; 3]) -> Option<(f64, f64)> {
        let d = sub(point, self.center());
        let cam: [f64; 3] = std::array::from_fn(|j| (0..3).map(|k| self.pose[k][j] * d[k]).sum());
        if cam[2] <= 0.0 {
            return None;
        }
        Some((
            self.focal * cam[0] / cam[2] + self.cx,
            self.focal * cam[1] / cam[2] + self.cy,
        ))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(Error::Invalid("cannot normalize a zero vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];

    #[test]
    fn principal_point_ray_is_the_optical_axis() {
        let cam = Camera::new(50.0, 8.5, 8.5, 17, 17, IDENTITY).unwrap();
        let r = cam.pixel_ray(8, 8, 1.0, 2.0).unwrap();
        assert_eq!(r.direction, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn pinhole_offset_by_focal_is_diagonal() {
        let cam = Camera::new(10.0, 5.5, 5.5, 32, 32, IDENTITY).unwrap();
        // Pixel center at cx + f.
        let r = cam.pixel_ray(15, 5, 1.0, 2.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((r.direction[0] - s).abs() < 1e-15 && r.direction[1].abs() < 1e-15);
        assert!((r.direction[2] - s).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = Camera::new(10.0, 4.0, 4.0, 8, 8, IDENTITY).unwrap();
        assert!(cam.pixel_ray(8, 0, 1.0, 2.0).is_err());
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let mut pose = IDENTITY;
        pose[0][0] = 1.01;
        assert!(Camera::new(10.0, 4.0, 4.0, 8, 8, pose).is_err());
    }

    #[test]
    fn all_directions_are_distinct() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], 20.0, 16, 16).unwrap();
        let dirs: Vec<[f64; 3]> = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .map(|(x, y)| cam.pixel_ray(x, y, 1.0, 5.0).unwrap().direction)
            .collect();
        for i in 0..dirs.len() {
            for j in i + 1..dirs.len() {
                assert_ne!(dirs[i], dirs[j]);
            }
        }
    }

    #[test]
    fn reprojection_recovers_pixel_centers() {
        let cam = Camera::look_at([0.5, -4.0, 1.5], [0.0; 3], [0.0, 0.0, 1.0], 98.0, 64, 64).unwrap();
        for (px, py) in [(0, 0), (13, 40), (63, 63), (32, 7)] {
            let r = cam.pixel_ray(px, py, 2.0, 6.0).unwrap();
            for d in [2.0, 3.7, 6.0] {
                let p: [f64; 3] = std::array::from_fn(|k| r.origin[k] + d * r.direction[k]);
                let (u, v) = cam.project(p).unwrap();
                assert!((u - (px as f64 + 0.5)).abs() < 1e-4 && (v - (py as f64 + 0.5)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn look_at_points_the_center_pixel_at_the_target() {
        let cam = Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 98.0, 64, 64).unwrap();
        let (u, v) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12);
        // World up maps to image up (smaller v).
        let (_, v_up) = cam.project([0.0, 0.0, 0.5]).unwrap();
        assert!(v_up < v);
    }
}
