//! Object pose from part-labelled 2D clicks and relative pose from labelled
//! contact regions.

use nalgebra::{Matrix6, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, M3, V3};
use crate::kinematics::{transform_points, Mesh, ObjectPose, ObjectTemplate};
use crate::optimizer::reprojection_loss;
use crate::projection::{CameraPose, Intrinsics, Keypoints2D};

const MIN_ANNOTATIONS: usize = 4;
const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartKeypoint {
    /// Centered pixel coordinates.
    pub position: [f64; 2],
    pub part: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartKeypointAnnotation {
    pub items: Vec<PartKeypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPnpConfig {
    pub starts: usize,
    pub max_alternations: usize,
    /// Levenberg-Marquardt iterations per refinement.
    pub lm_iterations: usize,
    /// A start counts as converged below this mean residual (pixels).
    pub residual_threshold_px: f64,
    pub rng_seed: u64,
    /// Replaces the hard assignment with a softmin of this temperature (px²)
    /// optimized by gradient descent.
    pub softmin_temperature: Option<f64>,
    pub softmin_steps: usize,
    pub softmin_step_size: f64,
}

impl Default for PartPnpConfig {
    fn default() -> Self {
        PartPnpConfig {
            starts: 16,
            max_alternations: 50,
            lm_iterations: 10,
            residual_threshold_px: 5.0,
            rng_seed: 0,
            softmin_temperature: None,
            softmin_steps: 500,
            softmin_step_size: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub pose: ObjectPose,
    /// Sum of squared pixel residuals after each alternation; index 0 is the
    /// starting pose.
    pub trace: Vec<f64>,
    pub mean_residual_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPnpSolution {
    /// Object pose in the camera frame.
    pub pose: ObjectPose,
    pub mean_residual_px: f64,
    pub best_start: usize,
    pub starts: Vec<StartOutcome>,
}

struct PartProblem<'a> {
    parts: Vec<Vec<V3<f64>>>,
    items: &'a [PartKeypoint],
    focal: f64,
    /// Scale already folded into `parts`.
    scale: f64,
}

impl PartProblem<'_> {
    fn project(&self, r: &M3<f64>, t: &V3<f64>, x: &V3<f64>) -> Option<[f64; 2]> {
        let p = geometry::add(&geometry::mat_vec(r, x), t);
        (p[2] > MIN_DEPTH).then(|| [self.focal * p[0] / p[2], self.focal * p[1] / p[2]])
    }

    fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    }

    /// Nearest part point per annotation and the summed squared residual.
    fn assign(&self, r: &M3<f64>, t: &V3<f64>) -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let assignment = self
            .items
            .iter()
            .map(|it| {
                let mut best = (usize::MAX, f64::INFINITY);
                for (j, x) in self.parts[it.part].iter().enumerate() {
                    let d = self
                        .project(r, t, x)
                        .map_or(f64::INFINITY, |uv| Self::sq(uv, it.position));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                total += best.1;
                best.0
            })
            .collect();
        (assignment, total)
    }

    fn assigned_points(&self, a: &[usize]) -> Vec<V3<f64>> {
        self.items
            .iter()
            .zip(a)
            .map(|(it, &j)| self.parts[it.part][j])
            .collect()
    }

    fn refine(&self, r: &mut M3<f64>, t: &mut V3<f64>, points: &[V3<f64>], iterations: usize) {
        let items: Vec<&PartKeypoint> = self.items.iter().collect();
        self.refine_weighted(r, t, &items, points, &vec![1.0; points.len()], iterations)
    }

    fn weighted_cost(
        &self,
        r: &M3<f64>,
        t: &V3<f64>,
        items: &[&PartKeypoint],
        points: &[V3<f64>],
        w: &[f64],
    ) -> f64 {
        items
            .iter()
            .zip(points)
            .zip(w)
            .map(|((it, x), w)| {
                self.project(r, t, x)
                    .map_or(f64::INFINITY, |uv| w * Self::sq(uv, it.position))
            })
            .sum()
    }

    /// Damped Gauss-Newton on fixed, weighted correspondences. Only
    /// cost-decreasing steps are accepted.
    fn refine_weighted(
        &self,
        r: &mut M3<f64>,
        t: &mut V3<f64>,
        items: &[&PartKeypoint],
        points: &[V3<f64>],
        w: &[f64],
        iterations: usize,
    ) {
        let mut cost = self.weighted_cost(r, t, items, points, w);
        let mut mu = 1e-3;
        for _ in 0..iterations {
            let mut jtj = Matrix6::<f64>::zeros();
            let mut jtr = Vector6::<f64>::zeros();
            for ((it, x), &wk) in items.iter().zip(points).zip(w) {
                let rx = geometry::mat_vec(r, x);
                let p = geometry::add(&rx, t);
                if p[2] <= MIN_DEPTH {
                    return;
                }
                let (f, z) = (self.focal, p[2]);
                let du = [f / z, 0.0, -f * p[0] / (z * z)];
                let dv = [0.0, f / z, -f * p[1] / (z * z)];
                let res = [f * p[0] / z - it.position[0], f * p[1] / z - it.position[1]];
                for (row, rv) in [(du, res[0]), (dv, res[1])] {
                    // d(exp(δ)·Rx)/dδ at 0 is -[Rx]×; ∂p/∂t = I
                    let dd = geometry::cross(&rx, &row);
                    let jrow = Vector6::new(dd[0], dd[1], dd[2], row[0], row[1], row[2]);
                    jtj += jrow * jrow.transpose() * wk;
                    jtr += jrow * (rv * wk);
                }
            }
            let mut accepted = false;
            for _ in 0..10 {
                let mut h = jtj;
                for k in 0..6 {
                    h[(k, k)] += mu * (jtj[(k, k)] + 1e-9);
                }
                let Some(step) = h.cholesky().map(|c| c.solve(&(-jtr))) else {
                    mu *= 10.0;
                    continue;
                };
                let nr = geometry::mat_mul(&geometry::exp_map(&[step[0], step[1], step[2]]), r);
                let nt = [t[0] + step[3], t[1] + step[4], t[2] + step[5]];
                let nc = self.weighted_cost(&nr, &nt, items, points, w);
                if nc < cost {
                    *r = nr;
                    *t = nt;
                    let gain = cost - nc;
                    cost = nc;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = gain > 1e-12 * (1.0 + cost);
                    break;
                }
                mu *= 4.0;
            }
            if !accepted {
                return;
            }
        }
    }

    /// Translation placing each part's centroid on its click's ray, by linear
    /// least squares under rotation `r`.
    fn centroid_translation(&self, r: &M3<f64>) -> Option<V3<f64>> {
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Vector3::<f64>::zeros();
        for it in self.items {
            let part = &self.parts[it.part];
            let mut c = [0.0; 3];
            for x in part {
                c = geometry::add(&c, x);
            }
            let c = geometry::mat_vec(r, &geometry::scale(&c, 1.0 / part.len() as f64));
            let f = self.focal;
            for (row, rhs) in [
                (
                    nalgebra::Vector3::new(f, 0.0, -it.position[0]),
                    it.position[0] * c[2] - f * c[0],
                ),
                (
                    nalgebra::Vector3::new(0.0, f, -it.position[1]),
                    it.position[1] * c[2] - f * c[1],
                ),
            ] {
                ata += row * row.transpose();
                atb += row * rhs;
            }
        }
        let t = ata.cholesky()?.solve(&atb);
        let t = [t[0], t[1], t[2]];
        let in_front = self
            .parts
            .iter()
            .flatten()
            .all(|x| geometry::add(&geometry::mat_vec(r, x), &t)[2] > MIN_DEPTH);
        in_front.then_some(t)
    }

    /// Soft-assignment refinement with a temperature (px²) falling from a
    /// fraction of the click spread down to one pixel.
    fn anneal(&self, r: &mut M3<f64>, t: &mut V3<f64>, cfg: &PartPnpConfig) {
        let n = self.items.len() as f64;
        let cx = self.items.iter().map(|i| i.position[0]).sum::<f64>() / n;
        let cy = self.items.iter().map(|i| i.position[1]).sum::<f64>() / n;
        let spread = self
            .items
            .iter()
            .map(|i| (i.position[0] - cx).powi(2) + (i.position[1] - cy).powi(2))
            .sum::<f64>()
            / n;
        let mut tau = (ANNEAL_START * spread).max(1.0);
        let mut items = Vec::new();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        while tau > 1.0 {
            items.clear();
            points.clear();
            weights.clear();
            for it in self.items {
                let part = &self.parts[it.part];
                let d: Vec<f64> = part
                    .iter()
                    .map(|x| {
                        self.project(r, t, x)
                            .map_or(f64::INFINITY, |uv| Self::sq(uv, it.position))
                    })
                    .collect();
                let m = d.iter().copied().fold(f64::INFINITY, f64::min);
                if !m.is_finite() {
                    return;
                }
                let e: Vec<f64> = d.iter().map(|v| (-(v - m) / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                for (x, ej) in part.iter().zip(e) {
                    items.push(it);
                    points.push(*x);
                    weights.push(ej / z);
                }
            }
            self.refine_weighted(r, t, &items, &points, &weights, cfg.lm_iterations);
            tau *= ANNEAL_COOLING;
        }
    }

    fn softmin_objective<T: Real>(&self, r: &M3<T>, t: &V3<T>, temperature: f64) -> Option<T> {
        let mut total = T::cst(0.0);
        for it in self.items {
            let mut d = Vec::with_capacity(self.parts[it.part].len());
            for x in &self.parts[it.part] {
                let p = geometry::add(&geometry::mat_vec(r, &geometry::lift(x)), t);
                if p[2].value() <= MIN_DEPTH {
                    return None;
                }
                let u = p[0] / p[2] * self.focal - it.position[0];
                let v = p[1] / p[2] * self.focal - it.position[1];
                d.push(u * u + v * v);
            }
            let m = *d
                .iter()
                .min_by(|a, b| a.value().total_cmp(&b.value()))
                .expect("parts are nonempty");
            let mut s = T::cst(0.0);
            for &dj in &d {
                s = s + (-(dj - m) / temperature).exp();
            }
            total = total + m - s.ln() * temperature;
        }
        Some(total)
    }

    fn mean_residual(&self, r: &M3<f64>, t: &V3<f64>) -> f64 {
        let (a, _) = self.assign(r, t);
        let sum: f64 = self
            .items
            .iter()
            .zip(&a)
            .map(|(it, &j)| {
                match (j != usize::MAX)
                    .then(|| self.project(r, t, &self.parts[it.part][j]))
                    .flatten()
                {
                    Some(uv) => Self::sq(uv, it.position).sqrt(),
                    None => f64::INFINITY,
                }
            })
            .sum();
        sum / self.items.len() as f64
    }
}

fn validate_annotation(template: &ObjectTemplate, ann: &PartKeypointAnnotation) -> Result<()> {
    if ann.items.len() < MIN_ANNOTATIONS {
        return Err(Error::InsufficientAnnotations {
            needed: MIN_ANNOTATIONS,
            got: ann.items.len(),
        });
    }
    for it in &ann.items {
        if it.part >= template.parts.len() {
            return Err(Error::Format(format!(
                "part label {} out of range",
                it.part
            )));
        }
        if !it.position.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("annotation position"));
        }
    }
    if template.parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Empty("template part"));
    }
    Ok(())
}

/// Initial depth from the ratio of the template's 3D extent to the spread of
/// the clicks; the translation lies on the ray through their centroid.
fn initial_translation(
    template: &ObjectTemplate,
    ann: &PartKeypointAnnotation,
    focal: f64,
) -> V3<f64> {
    let s = template.default_scale;
    let vs = &template.mesh.vertices;
    let mut c3 = [0.0; 3];
    for v in vs {
        c3 = geometry::add(&c3, v);
    }
    c3 = geometry::scale(&c3, 1.0 / vs.len() as f64);
    let rms3 = (vs
        .iter()
        .map(|v| geometry::dot(&geometry::sub(v, &c3), &geometry::sub(v, &c3)))
        .sum::<f64>()
        / vs.len() as f64)
        .sqrt()
        * s;
    let n = ann.items.len() as f64;
    let cx = ann.items.iter().map(|i| i.position[0]).sum::<f64>() / n;
    let cy = ann.items.iter().map(|i| i.position[1]).sum::<f64>() / n;
    let rms2 = (ann
        .items
        .iter()
        .map(|i| (i.position[0] - cx).powi(2) + (i.position[1] - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let z = if rms2 > 1e-9 {
        focal * rms3 / rms2
    } else {
        10.0 * rms3.max(1e-3)
    };
    [cx * z / focal, cy * z / focal, z]
}

/// Camera-frame pose from part-labelled clicks.
pub fn solve_object_pose(
    template: &ObjectTemplate,
    ann: &PartKeypointAnnotation,
    intr: &Intrinsics,
    cfg: &PartPnpConfig,
) -> Result<PartPnpSolution> {
    validate_annotation(template, ann)?;
    if cfg.starts == 0 {
        return Err(Error::InvalidConfig(
            "at least one start is required".into(),
        ));
    }
    if let Some(tau) = cfg.softmin_temperature {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(
                "softmin temperature must be positive".into(),
            ));
        }
    }
    let problem = PartProblem {
        parts: template
            .parts
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&i| geometry::scale(&template.mesh.vertices[i], template.default_scale))
                    .collect()
            })
            .collect(),
        items: &ann.items,
        focal: intr.focal,
        scale: template.default_scale,
    };
    let t0 = initial_translation(template, ann, intr.focal);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let rotations: Vec<M3<f64>> = (0..cfg.starts)
        .map(|_| geometry::random_rotation(&mut rng))
        .collect();

    let starts: Vec<StartOutcome> = rotations
        .iter()
        .map(|r0| match cfg.softmin_temperature {
            None => run_alternation(&problem, *r0, t0, cfg),
            Some(tau) => run_softmin(&problem, *r0, t0, tau, cfg),
        })
        .collect();

    let (best_start, best) = starts
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.trace
                .last()
                .unwrap_or(&f64::INFINITY)
                .total_cmp(b.1.trace.last().unwrap_or(&f64::INFINITY))
                .then(a.0.cmp(&b.0))
        })
        .expect("at least one start");
    if !(best.mean_residual_px < cfg.residual_threshold_px) {
        return Err(Error::NoConvergence {
            residual: best.mean_residual_px,
        });
    }
    Ok(PartPnpSolution {
        pose: best.pose.clone(),
        mean_residual_px: best.mean_residual_px,
        best_start,
        starts,
    })
}

const ANNEAL_START: f64 = 0.25;
const ANNEAL_COOLING: f64 = 0.5;

/// Depth multipliers tried along the ray of each start's translation.
const DEPTH_SCAN: [f64; 9] = [0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.25, 1.4, 1.6];

/// Alternates assignment and refinement until the assignment is stable and
/// the cost stops falling, appending the cost after each round to `trace`.
fn alternate(
    problem: &PartProblem,
    r: &mut M3<f64>,
    t: &mut V3<f64>,
    cfg: &PartPnpConfig,
    trace: &mut Vec<f64>,
) {
    let (mut assignment, _) = problem.assign(r, t);
    for _ in 0..cfg.max_alternations {
        if assignment.contains(&usize::MAX) {
            break;
        }
        problem.refine(
            r,
            t,
            &problem.assigned_points(&assignment),
            cfg.lm_iterations,
        );
        let (next, cost) = problem.assign(r, t);
        let prev = *trace.last().expect("trace starts nonempty");
        trace.push(cost);
        let stable = next == assignment && prev - cost <= 1e-12 * (1.0 + cost);
        assignment = next;
        if stable {
            break;
        }
    }
}

fn run_alternation(
    problem: &PartProblem,
    r0: M3<f64>,
    t0: V3<f64>,
    cfg: &PartPnpConfig,
) -> StartOutcome {
    // Nearest-point assignment aliases depth (a mid-edge click matches an
    // edge end at a smaller apparent size), so several depths along the start
    // ray are tried, each warmed up by soft assignment before the hard
    // alternation. The lowest final cost wins.
    let base = problem.centroid_translation(&r0).unwrap_or(t0);
    let mut best: Option<(M3<f64>, V3<f64>, Vec<f64>)> = None;
    for k in DEPTH_SCAN {
        let (mut r, mut t) = (r0, geometry::scale(&base, k));
        if !problem.assign(&r, &t).1.is_finite() {
            continue;
        }
        problem.anneal(&mut r, &mut t, cfg);
        let start = problem.assign(&r, &t).1;
        if !start.is_finite() {
            continue;
        }
        let mut trace = vec![start];
        alternate(problem, &mut r, &mut t, cfg, &mut trace);
        if best.as_ref().is_none_or(|b| trace.last() < b.2.last()) {
            best = Some((r, t, trace));
        }
    }
    let (mut r, mut t, mut trace) =
        best.unwrap_or_else(|| (r0, base, vec![problem.assign(&r0, &base).1]));
    swap_search(problem, &mut r, &mut t, cfg, &mut trace);
    finish(problem, r, t, trace)
}

/// Single-click reassignment search: each click is moved to each other point
/// of its part, the pose re-refined and alternated, and the move kept when
/// the cost falls.
fn swap_search(
    problem: &PartProblem,
    r: &mut M3<f64>,
    t: &mut V3<f64>,
    cfg: &PartPnpConfig,
    trace: &mut Vec<f64>,
) {
    for _ in 0..cfg.max_alternations {
        let (assignment, cost) = problem.assign(r, t);
        if assignment.contains(&usize::MAX) {
            return;
        }
        let mut improved = None;
        'search: for k in 0..assignment.len() {
            for j in 0..problem.parts[problem.items[k].part].len() {
                if j == assignment[k] {
                    continue;
                }
                let mut a = assignment.clone();
                a[k] = j;
                let (mut nr, mut nt) = (*r, *t);
                problem.refine(
                    &mut nr,
                    &mut nt,
                    &problem.assigned_points(&a),
                    cfg.lm_iterations,
                );
                let mut local = vec![problem.assign(&nr, &nt).1];
                alternate(problem, &mut nr, &mut nt, cfg, &mut local);
                let c = *local.last().expect("nonempty");
                if c < cost * (1.0 - 1e-9) {
                    improved = Some((nr, nt, c));
                    break 'search;
                }
            }
        }
        match improved {
            Some((nr, nt, c)) => {
                *r = nr;
                *t = nt;
                trace.push(c);
            }
            None => return,
        }
    }
}

fn run_softmin(
    problem: &PartProblem,
    r0: M3<f64>,
    t0: V3<f64>,
    tau: f64,
    cfg: &PartPnpConfig,
) -> StartOutcome {
    // translation is scaled by the initial depth so all six variables are O(1)
    let z0 = t0[2].abs().max(1e-3);
    let mut x = [0.0, 0.0, 0.0, t0[0] / z0, t0[1] / z0, t0[2] / z0];
    let mut adam = Adam::new(cfg.softmin_step_size, 6);
    let hard = |x: &[f64; 6]| {
        let r = geometry::mat_mul(&geometry::exp_map(&[x[0], x[1], x[2]]), &r0);
        let t = [x[3] * z0, x[4] * z0, x[5] * z0];
        (r, t)
    };
    let mut trace = vec![{
        let (r, t) = hard(&x);
        problem.assign(&r, &t).1
    }];
    for _ in 0..cfg.softmin_steps {
        let tape = Tape::new();
        let v: Vec<Var> = tape.vars(&x);
        let r = geometry::mat_mul(
            &geometry::exp_map(&[v[0], v[1], v[2]]),
            &geometry::lift_mat(&r0),
        );
        let t = [v[3] * z0, v[4] * z0, v[5] * z0];
        let Some(obj) = problem.softmin_objective(&r, &t, tau) else {
            break;
        };
        let g = tape.gradient(obj).wrt_all(&v);
        if !g.iter().all(|v| v.is_finite()) {
            break;
        }
        let before = x;
        adam.step(&mut x, &g);
        let (r, t) = hard(&x);
        if problem.softmin_objective(&r, &t, tau).is_none() {
            x = before;
            break;
        }
    }
    let (r, t) = hard(&x);
    trace.push(problem.assign(&r, &t).1);
    finish(problem, r, t, trace)
}

fn finish(problem: &PartProblem, r: M3<f64>, t: V3<f64>, trace: Vec<f64>) -> StartOutcome {
    StartOutcome {
        pose: ObjectPose {
            rotation: r,
            translation: t,
            scale: problem.scale,
        },
        mean_residual_px: problem.mean_residual(&r, &t),
        trace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactRegions {
    /// Vertex-index sets on the body mesh.
    pub human_regions: Vec<Vec<usize>>,
    /// Vertex-index sets on the object mesh.
    pub object_regions: Vec<Vec<usize>>,
}

impl ContactRegions {
    pub fn validate(&self, body_vertices: usize, object_vertices: usize) -> Result<()> {
        let ok = |sets: &[Vec<usize>], n: usize| {
            sets.iter()
                .all(|s| !s.is_empty() && s.iter().all(|&i| i < n))
        };
        if !ok(&self.human_regions, body_vertices) || !ok(&self.object_regions, object_vertices) {
            return Err(Error::Format(
                "contact regions must be nonempty and in range".into(),
            ));
        }
        Ok(())
    }

    /// Body vertices within `radius` of each listed joint, paired with the
    /// template's own contact regions.
    pub fn near_joints(
        body_mesh: &Mesh,
        joints: &[V3<f64>],
        selected: &[usize],
        radius: f64,
        template: &ObjectTemplate,
    ) -> Self {
        let human_regions = selected
            .iter()
            .map(|&j| {
                body_mesh
                    .vertices
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| geometry::norm(&geometry::sub(v, &joints[j])) <= radius)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        ContactRegions {
            human_regions,
            object_regions: template.contact_regions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPairAnnotation {
    /// (human region, object region)
    pub pairs: Vec<(usize, usize)>,
}

/// Object keypoints observed in one image, for the reprojection term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectObservation {
    pub keypoints: Keypoints2D,
    pub confidence: Vec<f64>,
    pub camera: CameraPose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativePoseConfig {
    pub steps: usize,
    pub step_size: f64,
    pub lambda_contact: f64,
    pub lambda_coor: f64,
    pub lambda_norm: f64,
}

impl Default for RelativePoseConfig {
    fn default() -> Self {
        RelativePoseConfig {
            steps: 300,
            step_size: 0.01,
            lambda_contact: 1.0,
            lambda_coor: 0.1,
            lambda_norm: 0.01,
        }
    }
}

fn distance<T: Real>(a: &V3<T>, b: &V3<T>) -> T {
    let d = geometry::sub(a, b);
    let sq = geometry::dot(&d, &d);
    // zero distance has a zero subgradient
    if sq.value() == 0.0 {
        T::cst(0.0)
    } else {
        sq.sqrt()
    }
}

fn directed<T: Real>(from: &[V3<T>], to: &[V3<T>]) -> T {
    let mut sum = T::cst(0.0);
    for p in from {
        let nearest = to
            .iter()
            .min_by(|a, b| {
                let da = geometry::values(&geometry::sub(p, a));
                let db = geometry::values(&geometry::sub(p, b));
                geometry::dot(&da, &da).total_cmp(&geometry::dot(&db, &db))
            })
            .expect("regions are nonempty");
        sum = sum + distance(p, nearest);
    }
    sum / from.len() as f64
}

/// Mean nearest distance from `a` to `b` plus from `b` to `a`.
pub fn region_chamfer<T: Real>(a: &[V3<T>], b: &[V3<T>]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("contact region"));
    }
    Ok(directed(a, b) + directed(b, a))
}

/// Sum of region chamfers over the labelled pairs.
pub fn contact_pair_loss<T: Real>(
    body_vertices: &[V3<f64>],
    object_vertices: &[V3<T>],
    regions: &ContactRegions,
    pairs: &ContactPairAnnotation,
) -> Result<T> {
    let mut total = T::cst(0.0);
    for &(i, j) in &pairs.pairs {
        let h = regions
            .human_regions
            .get(i)
            .ok_or_else(|| Error::Format(format!("human region {i} out of range")))?;
        let o = regions
            .object_regions
            .get(j)
            .ok_or_else(|| Error::Format(format!("object region {j} out of range")))?;
        let hp: Vec<V3<T>> = h
            .iter()
            .map(|&k| geometry::lift(&body_vertices[k]))
            .collect();
        let op: Vec<V3<T>> = o.iter().map(|&k| object_vertices[k]).collect();
        total = total + region_chamfer(&hp, &op)?;
    }
    Ok(total)
}

/// Smallest vertex distance between each labelled pair of regions, meters.
pub fn region_gaps(
    body_vertices: &[V3<f64>],
    object_vertices: &[V3<f64>],
    regions: &ContactRegions,
    pairs: &ContactPairAnnotation,
) -> Vec<f64> {
    pairs
        .pairs
        .iter()
        .map(|&(i, j)| {
            let mut best = f64::INFINITY;
            for &a in &regions.human_regions[i] {
                for &b in &regions.object_regions[j] {
                    best = best.min(geometry::norm(&geometry::sub(
                        &body_vertices[a],
                        &object_vertices[b],
                    )));
                }
            }
            best
        })
        .collect()
}

fn relative_objective<T: Real>(
    x: &[T],
    body_mesh: &Mesh,
    template: &ObjectTemplate,
    regions: &ContactRegions,
    pairs: &ContactPairAnnotation,
    obs: Option<&ObjectObservation>,
    init: &ObjectPose,
    cfg: &RelativePoseConfig,
) -> Result<T> {
    let r = geometry::mat_mul(
        &geometry::exp_map(&[x[0], x[1], x[2]]),
        &geometry::lift_mat(&init.rotation),
    );
    let t = [x[3], x[4], x[5]];
    let s = x[6].exp();
    let mut total = T::cst(0.0);
    if cfg.lambda_contact != 0.0 {
        let verts = transform_points(&template.mesh.vertices, &r, &t, s);
        total = total
            + contact_pair_loss(&body_mesh.vertices, &verts, regions, pairs)? * cfg.lambda_contact;
    }
    if let (Some(o), true) = (obs, cfg.lambda_coor != 0.0) {
        let kps = transform_points(&template.keypoints_local(), &r, &t, s);
        total = total
            + reprojection_loss(&kps, &o.keypoints, &o.confidence, &o.camera, &o.intrinsics)?
                * cfg.lambda_coor;
    }
    if cfg.lambda_norm != 0.0 {
        total = total + (x[6] - init.scale.ln()).powi2() * cfg.lambda_norm;
    }
    Ok(total)
}

/// Object pose in the body frame that brings the labelled regions together.
pub fn solve_relative_pose(
    body_mesh: &Mesh,
    template: &ObjectTemplate,
    regions: &ContactRegions,
    pairs: &ContactPairAnnotation,
    obs: Option<&ObjectObservation>,
    init: &ObjectPose,
    cfg: &RelativePoseConfig,
) -> Result<ObjectPose> {
    if pairs.pairs.is_empty() {
        return Err(Error::Empty("contact pairs"));
    }
    regions.validate(body_mesh.vertices.len(), template.mesh.vertices.len())?;
    init.validate()?;
    let mut x = vec![
        0.0,
        0.0,
        0.0,
        init.translation[0],
        init.translation[1],
        init.translation[2],
        init.scale.ln(),
    ];
    let mut adam = Adam::new(cfg.step_size, x.len());
    let mut best = (f64::INFINITY, x.clone());
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let v = tape.vars(&x);
        let f = relative_objective(&v, body_mesh, template, regions, pairs, obs, init, cfg)?;
        if !f.value().is_finite() {
            break;
        }
        if f.value() < best.0 {
            best = (f.value(), x.clone());
        }
        let g = tape.gradient(f).wrt_all(&v);
        if !g.iter().all(|v| v.is_finite()) {
            break;
        }
        adam.step(&mut x, &g);
    }
    if let Ok(f) = relative_objective(&x, body_mesh, template, regions, pairs, obs, init, cfg) {
        if f < best.0 {
            best = (f, x.clone());
        }
    }
    let x = best.1;
    Ok(ObjectPose {
        rotation: geometry::mat_mul(&geometry::exp_map(&[x[0], x[1], x[2]]), &init.rotation),
        translation: [x[3], x[4], x[5]],
        scale: x[6].exp(),
    })
}
