//! Pinhole camera and the 2.5D ray-bundle representation.
//!
//! Image coordinates are centered: the principal point is the origin, `u`
//! grows to the right and `v` downward.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{self, M3, V3};
use crate::kinematics::KeypointSet;

/// Minimum camera-frame depth, meters.
pub const EPS_DEPTH: f64 = 1e-6;

/// Camera orientation and center in the body-local frame.
///
/// Columns of `rotation` are the camera axes expressed in body coordinates, so
/// a body-frame point `x` has camera coordinates `rotationᵀ (x − translation)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: M3<f64>,
    pub translation: V3<f64>,
}

impl CameraPose {
    /// From the body pose expressed in camera coordinates.
    pub fn from_body_pose(r_body: &M3<f64>, t_body: &V3<f64>) -> Self {
        let rotation = geometry::transpose(r_body);
        let translation = geometry::scale(&geometry::mat_vec(&rotation, t_body), -1.0);
        CameraPose {
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, image `v` axis aligned with `-up`.
    pub fn look_at(eye: V3<f64>, target: V3<f64>, up: V3<f64>) -> Self {
        let z = geometry::normalize(&geometry::sub(&target, &eye));
        let up_perp = geometry::sub(&up, &geometry::scale(&z, geometry::dot(&up, &z)));
        let y = geometry::scale(&geometry::normalize(&up_perp), -1.0);
        let x = geometry::cross(&y, &z);
        CameraPose {
            rotation: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            translation: eye,
        }
    }

    pub fn to_camera(&self, x: &V3<f64>) -> V3<f64> {
        geometry::mat_t_vec(&self.rotation, &geometry::sub(x, &self.translation))
    }
}

/// Focal length and image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(focal: f64, width: u32, height: u32) -> Self {
        Intrinsics {
            focal,
            width,
            height,
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Centered `(u, v)` to top-left pixel coordinates.
    pub fn to_pixel(&self, uv: [f64; 2]) -> [f64; 2] {
        [
            uv[0] + self.width as f64 / 2.0,
            uv[1] + self.height as f64 / 2.0,
        ]
    }

    pub fn from_pixel(&self, px: [f64; 2]) -> [f64; 2] {
        [
            px[0] - self.width as f64 / 2.0,
            px[1] - self.height as f64 / 2.0,
        ]
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics::new(1000.0, 1000, 1000)
    }
}

/// Centered 2D keypoints, same order as the 3D keypoint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
}

/// Unit ray directions plus the camera center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rep25D<T = f64> {
    pub directions: Vec<V3<T>>,
    pub cam_translation: V3<T>,
}

impl<T: Real> Rep25D<T> {
    pub fn n(&self) -> usize {
        self.directions.len()
    }

    /// `(d₁, …, dₙ, t_cam)` flattened row by row.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(3 * (self.n() + 1));
        for d in &self.directions {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&self.cam_translation);
        out
    }
}

impl Rep25D<f64> {
    /// Inverse of [`Rep25D::flatten`]; direction blocks are re-normalized.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() < 3 || flat.len() % 3 != 0 {
            return Err(Error::DimensionMismatch {
                what: "flattened 2.5D vector",
                expected: 3 * (flat.len() / 3 + 1),
                got: flat.len(),
            });
        }
        let n = flat.len() / 3 - 1;
        let directions = (0..n)
            .map(|i| geometry::normalize(&[flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]]))
            .collect();
        Ok(Rep25D {
            directions,
            cam_translation: [flat[3 * n], flat[3 * n + 1], flat[3 * n + 2]],
        })
    }
}

/// Camera-frame coordinates of body-frame points, generic for differentiation.
pub fn to_camera<T: Real>(points: &[V3<T>], cam: &CameraPose) -> Vec<V3<T>> {
    let r = geometry::lift_mat::<T>(&cam.rotation);
    let t = geometry::lift::<T>(&cam.translation);
    points
        .iter()
        .map(|x| geometry::mat_t_vec(&r, &geometry::sub(x, &t)))
        .collect()
}

/// Perspective projection with the depth guard.
pub fn project_generic<T: Real>(
    points: &[V3<T>],
    cam: &CameraPose,
    focal: f64,
) -> Result<Vec<[T; 2]>> {
    to_camera(points, cam)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if !(c[2].value() > EPS_DEPTH) {
                return Err(Error::BehindCamera(i));
            }
            Ok([c[0] / c[2] * focal, c[1] / c[2] * focal])
        })
        .collect()
}

pub fn project(points: &[V3<f64>], cam: &CameraPose, intr: &Intrinsics) -> Result<Keypoints2D> {
    Ok(Keypoints2D {
        points: project_generic(points, cam, intr.focal)?,
    })
}

/// Ray directions from observed 2D keypoints and the camera pose.
pub fn rep25d_from_2d(kps: &Keypoints2D, cam: &CameraPose, intr: &Intrinsics) -> Rep25D {
    let directions = kps
        .points
        .iter()
        .map(|&[u, v]| geometry::normalize(&geometry::mat_vec(&cam.rotation, &[u, v, intr.focal])))
        .collect();
    Rep25D {
        directions,
        cam_translation: cam.translation,
    }
}

/// Ray directions from 3D keypoints seen from `t_cam`.
pub fn rep25d_from_points<T: Real>(points: &[V3<T>], t_cam: &V3<T>) -> Result<Rep25D<T>> {
    let directions = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d = geometry::sub(x, t_cam);
            let n = geometry::norm(&d);
            if !(n.value() > 1e-9) {
                return Err(Error::DegenerateRay(i));
            }
            Ok([d[0] / n, d[1] / n, d[2] / n])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rep25D {
        directions,
        cam_translation: *t_cam,
    })
}

pub fn rep25d_from_3d(kps: &KeypointSet, t_cam: &V3<f64>) -> Result<Rep25D> {
    rep25d_from_points(&kps.points, t_cam)
}

/// Point on the viewing ray of `(u, v)` at camera depth `depth`.
pub fn back_project(uv: [f64; 2], depth: f64, cam: &CameraPose, intr: &Intrinsics) -> V3<f64> {
    let c = [
        uv[0] / intr.focal * depth,
        uv[1] / intr.focal * depth,
        depth,
    ];
    geometry::add(&geometry::mat_vec(&cam.rotation, &c), &cam.translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::kinematics::assemble_keypoints;
    use rand::{Rng, SeedableRng};

    fn axis_cam(z: f64) -> CameraPose {
        CameraPose {
            rotation: geometry::identity(),
            translation: [0.0, 0.0, z],
        }
    }

    #[test]
    fn projection_examples() {
        let intr = Intrinsics::new(1.0, 2, 2);
        let kp = project(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &axis_cam(-5.0), &intr).unwrap();
        assert_eq!(kp.points[0], [0.0, 0.0]);
        assert!((kp.points[1][0] - 0.2).abs() < 1e-15 && kp.points[1][1] == 0.0);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let intr = Intrinsics::new(1.0, 2, 2);
        let err =
            project(&[[0.0, 0.0, 1.0], [0.0, 0.0, -6.0]], &axis_cam(-5.0), &intr).unwrap_err();
        assert!(matches!(err, Error::BehindCamera(1)));
    }

    #[test]
    fn rep_from_2d_examples() {
        let intr = Intrinsics::new(500.0, 1000, 1000);
        let cam = axis_cam(0.0);
        let r = rep25d_from_2d(
            &Keypoints2D {
                points: vec![[0.0, 0.0], [500.0, 0.0]],
            },
            &cam,
            &intr,
        );
        assert_eq!(r.directions[0], [0.0, 0.0, 1.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.directions[1][0] - s).abs() < 1e-15 && (r.directions[1][2] - s).abs() < 1e-15);
    }

    #[test]
    fn rep_from_3d_examples() {
        let r = rep25d_from_points(&[[0.0, 0.0, 1.0], [3.0, 4.0, 0.0]], &[0.0; 3]).unwrap();
        assert_eq!(r.directions[0], [0.0, 0.0, 1.0]);
        assert!(
            (r.directions[1][0] - 0.6).abs() < 1e-15 && (r.directions[1][1] - 0.8).abs() < 1e-15
        );
        assert!(matches!(
            rep25d_from_points(&[[1.0, 1.0, 1.0]], &[1.0, 1.0, 1.0]),
            Err(Error::DegenerateRay(0))
        ));
    }

    fn random_scene(rng: &mut impl Rng) -> (Vec<V3<f64>>, CameraPose) {
        let pts: Vec<V3<f64>> = (0..30)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let eye = geometry::scale(&geometry::random_unit(rng), rng.random_range(3.0..6.0));
        (pts, CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0]))
    }

    #[test]
    fn back_projected_rays_pass_through_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let intr = Intrinsics::default();
        for _ in 0..50 {
            let (pts, cam) = random_scene(&mut rng);
            let kp = project(&pts, &cam, &intr).unwrap();
            for (p, uv) in pts.iter().zip(&kp.points) {
                let depth = cam.to_camera(p)[2];
                let q = back_project(*uv, depth, &cam, &intr);
                assert!(geometry::norm(&geometry::sub(p, &q)) < 1e-9);
            }
        }
    }

    #[test]
    fn both_constructions_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let intr = Intrinsics::default();
        for _ in 0..100 {
            let (pts, cam) = random_scene(&mut rng);
            let ks = assemble_keypoints(&pts[..22], &pts[22..]);
            let a = rep25d_from_2d(&project(&pts, &cam, &intr).unwrap(), &cam, &intr);
            let b = rep25d_from_3d(&ks, &cam.translation).unwrap();
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_is_scale_invariant_in_camera_frame() {
        let cam = axis_cam(0.0);
        let intr = Intrinsics::default();
        let p = [0.3, -0.2, 2.0];
        let a = project(&[p], &cam, &intr).unwrap();
        let b = project(&[geometry::scale(&p, 3.7)], &cam, &intr).unwrap();
        assert!((a.points[0][0] - b.points[0][0]).abs() < 1e-12);
        assert!((a.points[0][1] - b.points[0][1]).abs() < 1e-12);
    }

    #[test]
    fn body_pose_relation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let r = geometry::random_rotation(&mut rng);
        let t = [0.1, 0.2, 4.0];
        let cam = CameraPose::from_body_pose(&r, &t);
        let x = [0.3, 0.4, -0.2];
        let via_body = geometry::add(&geometry::mat_vec(&r, &x), &t);
        let via_cam = cam.to_camera(&x);
        for k in 0..3 {
            assert!((via_body[k] - via_cam[k]).abs() < 1e-12);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        // inputs: 4 points, rotation chart (3), camera center (3)
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let base = CameraPose::look_at([0.5, 0.3, -4.0], [0.0; 3], [0.0, 1.0, 0.0]);
        let x: Vec<f64> = (0..12)
            .map(|_| rng.random_range(-0.5..0.5))
            .chain([0.05, -0.02, 0.03, 0.1, -0.1, 0.2])
            .collect();
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        fn eval<T: Real>(p: &[T], base: &CameraPose, w: &[f64]) -> T {
            let pts: Vec<V3<T>> = (0..4)
                .map(|i| [p[3 * i], p[3 * i + 1], p[3 * i + 2]])
                .collect();
            let r = geometry::mat_mul(
                &geometry::lift_mat::<T>(&base.rotation),
                &geometry::exp_map(&[p[12], p[13], p[14]]),
            );
            let t = geometry::add(
                &geometry::lift::<T>(&base.translation),
                &[p[15], p[16], p[17]],
            );
            let mut acc = T::cst(0.0);
            let mut k = 0;
            for x in &pts {
                let c = geometry::mat_t_vec(&r, &geometry::sub(x, &t));
                acc = acc + c[0] / c[2] * 1000.0 * w[k] + c[1] / c[2] * 1000.0 * w[k + 1];
                k += 2;
            }
            let rep = rep25d_from_points(&pts, &t).unwrap();
            for (v, wk) in rep.flatten().iter().zip(&w[8..]) {
                acc = acc + *v * *wk;
            }
            acc
        }
        let tape = Tape::new();
        let vars = tape.vars(&x);
        let g = tape.gradient(eval(&vars, &base, &w)).wrt_all(&vars);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (eval(&xp, &base, &w) - eval(&xm, &base, &w)) / (2.0 * h);
            assert!(rel_err(fd, g[i]) < 1e-4, "input {i}: {fd} vs {}", g[i]);
        }
    }
}
