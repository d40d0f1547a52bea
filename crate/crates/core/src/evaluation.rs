//! Surface sampling, rigid alignment, chamfer distance and pose errors.
//!
//! Chamfer values are `(mean_a min_b ‖a−b‖ + mean_b min_a ‖a−b‖) / 2` in
//! centimeters.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, M3, V3};
use crate::kinematics::{object_mesh, BodyModel, Mesh, ObjectTemplate, SceneParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<V3<f64>>,
}

/// Area-weighted uniform samples on the surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.triangle_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::ZeroArea);
    }
    let points = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let f = cumulative
                .partition_point(|&c| c <= u)
                .min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect();
    Ok(PointCloud { points })
}

/// `b ≈ s·R·a + t`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: M3<f64>,
    pub translation: V3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &V3<f64>) -> V3<f64> {
        geometry::add(
            &geometry::scale(&geometry::mat_vec(&self.rotation, p), self.scale),
            &self.translation,
        )
    }

    pub fn apply_all(&self, pts: &[V3<f64>]) -> Vec<V3<f64>> {
        pts.iter().map(|p| self.apply(p)).collect()
    }
}

fn centroid(pts: &[V3<f64>]) -> V3<f64> {
    let mut c = [0.0; 3];
    for p in pts {
        c = geometry::add(&c, p);
    }
    geometry::scale(&c, 1.0 / pts.len() as f64)
}

/// Least-squares rigid alignment of corresponding points (`b ≈ R a + t`).
pub fn procrustes_align(a: &PointCloud, b: &PointCloud) -> Result<Similarity> {
    align(a, b, false)
}

/// As [`procrustes_align`] with an isotropic scale.
pub fn procrustes_align_scaled(a: &PointCloud, b: &PointCloud) -> Result<Similarity> {
    align(a, b, true)
}

fn align(a: &PointCloud, b: &PointCloud, with_scale: bool) -> Result<Similarity> {
    if a.points.len() != b.points.len() {
        return Err(Error::DimensionMismatch {
            what: "corresponding clouds",
            expected: a.points.len(),
            got: b.points.len(),
        });
    }
    if a.points.len() < 3 {
        return Err(Error::RankDeficient);
    }
    let (ca, cb) = (centroid(&a.points), centroid(&b.points));
    let mut h = Matrix3::<f64>::zeros();
    let mut var_a = 0.0;
    for (p, q) in a.points.iter().zip(&b.points) {
        let pa = Vector3::from(geometry::sub(p, &ca));
        let qb = Vector3::from(geometry::sub(q, &cb));
        h += qb * pa.transpose();
        var_a += pa.norm_squared();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sv = svd.singular_values;
    // rank check on the source configuration
    let spread = {
        let mut cov = Matrix3::<f64>::zeros();
        for p in &a.points {
            let v = Vector3::from(geometry::sub(p, &ca));
            cov += v * v.transpose();
        }
        let mut e = cov.symmetric_eigenvalues().as_slice().to_vec();
        e.sort_by(|x, y| y.total_cmp(x));
        e
    };
    if !(spread[0] > 0.0) || spread[1] <= 1e-12 * spread[0] {
        return Err(Error::RankDeficient);
    }
    let mut d = Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
        sv[2] = -sv[2];
    }
    let r = u * d * vt;
    let scale = if with_scale { sv.sum() / var_a } else { 1.0 };
    let rotation = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)]));
    let rc = geometry::scale(&geometry::mat_vec(&rotation, &ca), scale);
    Ok(Similarity {
        rotation,
        translation: geometry::sub(&cb, &rc),
        scale,
    })
}

/// Symmetric mean nearest-neighbor distance, centimeters.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let directed = |x: &[V3<f64>], y: &[V3<f64>]| -> f64 {
        let sum: f64 = x
            .iter()
            .map(|p| {
                y.iter()
                    .map(|q| {
                        let d = geometry::sub(p, q);
                        geometry::dot(&d, &d)
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        sum / x.len() as f64
    };
    Ok(50.0 * (directed(&a.points, &b.points) + directed(&b.points, &a.points)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Per-mesh Procrustes alignment, then chamfer.
    Behave,
    /// Pelvis-rooted, no alignment.
    WildHoi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub rng_seed: u64,
    /// Allow a scale in the Procrustes step.
    pub with_scale: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10_000,
            rng_seed: 0,
            with_scale: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub smpl_chamfer_cm: f64,
    pub object_chamfer_cm: f64,
    pub rotation_error_deg: f64,
    pub translation_error_cm: f64,
}

/// Chamfer between `pred` and `gt` after optionally aligning `pred` onto `gt`
/// through their shared vertex correspondence. Both meshes are sampled with
/// the same seed.
fn mesh_chamfer(pred: &Mesh, gt: &Mesh, align_first: bool, cfg: &EvalConfig) -> Result<f64> {
    if pred.vertices.len() != gt.vertices.len() || pred.faces != gt.faces {
        return Err(Error::TemplateMismatch(
            "meshes do not share topology".into(),
        ));
    }
    let pred = if align_first {
        let a = PointCloud {
            points: pred.vertices.clone(),
        };
        let b = PointCloud {
            points: gt.vertices.clone(),
        };
        let tf = if cfg.with_scale {
            procrustes_align_scaled(&a, &b)?
        } else {
            procrustes_align(&a, &b)?
        };
        pred.with_vertices(tf.apply_all(&pred.vertices))
    } else {
        pred.clone()
    };
    let sa = sample_surface(
        &pred,
        cfg.samples,
        &mut ChaCha8Rng::seed_from_u64(cfg.rng_seed),
    )?;
    let sb = sample_surface(
        gt,
        cfg.samples,
        &mut ChaCha8Rng::seed_from_u64(cfg.rng_seed),
    )?;
    chamfer(&sa, &sb)
}

fn translated(mesh: &Mesh, by: &V3<f64>) -> Mesh {
    mesh.with_vertices(mesh.vertices.iter().map(|v| geometry::sub(v, by)).collect())
}

pub fn evaluate<M: BodyModel>(
    scene: &SceneParams,
    gt: &SceneParams,
    body: &M,
    template: &ObjectTemplate,
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if scene.body.beta.len() != gt.body.beta.len() || scene.body.theta.len() != gt.body.theta.len()
    {
        return Err(Error::TemplateMismatch(
            "body parameter sizes differ".into(),
        ));
    }
    let (jp, hp) = body.evaluate(&scene.body)?;
    let (jg, hg) = body.evaluate(&gt.body)?;
    let op = object_mesh(template, &scene.object);
    let og = object_mesh(template, &gt.object);
    let rotation_error_deg =
        geometry::rotation_angle_between(&gt.object.rotation, &scene.object.rotation).to_degrees();
    let (smpl, object, translation_error_cm) = match mode {
        EvalMode::Behave => (
            mesh_chamfer(&hp, &hg, true, cfg)?,
            mesh_chamfer(&op, &og, true, cfg)?,
            100.0
                * geometry::norm(&geometry::sub(
                    &scene.object.translation,
                    &gt.object.translation,
                )),
        ),
        EvalMode::WildHoi => {
            let (rp, rg) = (jp[0], jg[0]);
            let tp = geometry::sub(&scene.object.translation, &rp);
            let tg = geometry::sub(&gt.object.translation, &rg);
            (
                mesh_chamfer(&translated(&hp, &rp), &translated(&hg, &rg), false, cfg)?,
                mesh_chamfer(&translated(&op, &rp), &translated(&og, &rg), false, cfg)?,
                100.0 * geometry::norm(&geometry::sub(&tp, &tg)),
            )
        }
    };
    Ok(MetricReport {
        smpl_chamfer_cm: smpl,
        object_chamfer_cm: object,
        rotation_error_deg,
        translation_error_cm,
    })
}

/// Mean and median of each metric over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: MetricReport,
    pub median: MetricReport,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let column = |f: fn(&MetricReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let stat = |agg: &dyn Fn(&mut [f64]) -> f64| MetricReport {
        smpl_chamfer_cm: agg(&mut column(|r| r.smpl_chamfer_cm)),
        object_chamfer_cm: agg(&mut column(|r| r.object_chamfer_cm)),
        rotation_error_deg: agg(&mut column(|r| r.rotation_error_deg)),
        translation_error_cm: agg(&mut column(|r| r.translation_error_cm)),
    };
    let mean = |v: &mut [f64]| v.iter().sum::<f64>() / v.len() as f64;
    MetricSummary {
        count: reports.len(),
        mean: stat(&mean),
        median: stat(&median),
    }
}
