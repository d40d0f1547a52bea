//! Scene refinement against reprojection, regularization, the learned
//! multi-view prior and occlusion-derived contact.
//!
//! Variables are packed as `[δ (3), t (3), log s (1), β, θ, virtual camera
//! translations (3m)]`, with the object rotation `R = exp(δ)·R₀` re-anchored
//! at the start of each phase.

pub mod occlusion;
pub mod render;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{ConditionVector, FlowParams};
use crate::geometry::{self, M3, V3};
use crate::kinematics::{
    assemble_keypoints, transform_points, BodyModel, BodyParams, ObjectPose, ObjectTemplate,
    RootTransform, SceneParams,
};
use crate::projection::{project_generic, rep25d_from_points, CameraPose, Intrinsics, Keypoints2D};

pub use occlusion::{
    contact_candidates, contact_loss, mean_occlusion_map, occlusion_map, ContactCandidates,
    ContactWeighting, MeanOcclusionMap, OcclusionMap,
};
pub use render::{render_masks, MaskGrid, RenderedMasks};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_j: f64,
    pub lambda_coor: f64,
    pub lambda_norm: f64,
    pub lambda_prior: f64,
    pub lambda_contact: f64,
    pub eta: f64,
}

impl LossWeights {
    pub const DEFAULT_LAMBDA_NORM: f64 = 0.01;

    pub fn wildhoi() -> Self {
        LossWeights {
            lambda_j: 0.01,
            lambda_coor: 0.1,
            lambda_norm: Self::DEFAULT_LAMBDA_NORM,
            lambda_prior: 0.1,
            lambda_contact: 1.0,
            eta: 0.3,
        }
    }

    /// Contact disabled.
    pub fn behave() -> Self {
        LossWeights {
            lambda_j: 0.1,
            lambda_coor: 0.1,
            lambda_prior: 1.0,
            lambda_contact: 0.0,
            ..Self::wildhoi()
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_j: 0.0,
            lambda_coor: 0.0,
            lambda_norm: 0.0,
            lambda_prior: 0.0,
            lambda_contact: 0.0,
            eta: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_j,
            self.lambda_coor,
            self.lambda_norm,
            self.lambda_prior,
            self.lambda_contact,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative and eta in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::wildhoi()
    }
}

/// Detections and metadata of the image being reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub human_keypoints: Keypoints2D,
    pub human_confidence: Vec<f64>,
    pub object_keypoints: Keypoints2D,
    pub object_confidence: Vec<f64>,
    pub person_mask: MaskGrid,
    pub object_mask: MaskGrid,
    /// Pose of the observing camera in the body-local frame.
    pub camera: CameraPose,
    pub intrinsics: Intrinsics,
    pub condition: ConditionVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub m: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub step_size: f64,
    pub rng_seed: u64,
    pub weights: LossWeights,
    #[serde(default)]
    pub contact_weighting: ContactWeighting,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            m: 8,
            phase1_steps: 200,
            phase2_steps: 300,
            step_size: 0.01,
            rng_seed: 0,
            weights: LossWeights::default(),
            contact_weighting: ContactWeighting::Inside,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.m == 0 || self.phase1_steps + self.phase2_steps == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(
                "m, step counts and step size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualCameraSet {
    pub translations: Vec<V3<f64>>,
}

/// Weighted-sum ingredients, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub human: f64,
    pub object: f64,
    pub norm: f64,
    pub prior: f64,
    pub contact: f64,
    pub total: f64,
}

/// Confidence-weighted squared pixel error over `n` points divided by `n·diag²`.
pub fn reprojection_loss<T: Real>(
    points: &[V3<T>],
    detected: &Keypoints2D,
    confidence: &[f64],
    cam: &CameraPose,
    intr: &Intrinsics,
) -> Result<T> {
    if detected.points.len() != points.len() || confidence.len() != points.len() {
        return Err(Error::DimensionMismatch {
            what: "detected keypoints",
            expected: points.len(),
            got: detected.points.len(),
        });
    }
    if points.is_empty() {
        return Ok(T::cst(0.0));
    }
    let proj = project_generic(points, cam, intr.focal)?;
    let mut sum = T::cst(0.0);
    for ((p, d), &c) in proj.iter().zip(&detected.points).zip(confidence) {
        let du = p[0] - d[0];
        let dv = p[1] - d[1];
        sum = sum + (du * du + dv * dv) * c;
    }
    let diag = intr.diagonal();
    Ok(sum / (points.len() as f64 * diag * diag))
}

pub fn reprojection_loss_human<M: BodyModel>(
    body: &M,
    scene: &SceneParams,
    obs: &Observations,
) -> Result<f64> {
    let (joints, _) = body.forward(
        &scene.body.beta,
        &scene.body.theta,
        &RootTransform::identity(),
    )?;
    reprojection_loss(
        &joints,
        &obs.human_keypoints,
        &obs.human_confidence,
        &obs.camera,
        &obs.intrinsics,
    )
}

pub fn reprojection_loss_object(
    template: &ObjectTemplate,
    scene: &SceneParams,
    obs: &Observations,
) -> Result<f64> {
    let kps = crate::kinematics::object_keypoints(template, &scene.object);
    reprojection_loss(
        &kps,
        &obs.object_keypoints,
        &obs.object_confidence,
        &obs.camera,
        &obs.intrinsics,
    )
}

/// `‖θ − θ₀‖² + ‖β‖² + (log s − log s₀)²`
pub fn regularization_terms<T: Real>(
    theta: &[T],
    beta: &[T],
    log_s: T,
    theta0: &[f64],
    log_s0: f64,
) -> T {
    let mut r = T::cst(0.0);
    for (t, t0) in theta.iter().zip(theta0) {
        let d = *t - *t0;
        r = r + d * d;
    }
    for b in beta {
        r = r + *b * *b;
    }
    let ds = log_s - log_s0;
    r + ds * ds
}

pub fn regularization(scene: &SceneParams, init: &SceneParams) -> f64 {
    regularization_terms(
        &scene.body.theta,
        &scene.body.beta,
        scene.object.scale.ln(),
        &init.body.theta,
        init.object.scale.ln(),
    )
}

/// `−Σᵢ log p(X₂.₅D(keypoints, t̂ᵢ) | f)`, differentiable w.r.t. keypoints and cameras.
pub fn prior_terms<T: Real>(
    keypoints: &[V3<T>],
    cams: &[V3<T>],
    flow: &FlowParams,
    f: &ConditionVector,
) -> Result<T> {
    let mut total = T::cst(0.0);
    for t in cams {
        let flat = rep25d_from_points(keypoints, t)?.flatten();
        let vals: Vec<f64> = flat.iter().map(|v| v.value()).collect();
        let (lp, g) = flow.log_prob_grad(&vals, f)?;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        total = total + T::custom(&flat, -lp, &neg);
    }
    Ok(total)
}

fn scene_keypoints<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
) -> Result<Vec<V3<f64>>> {
    let (joints, _) = body.forward(
        &scene.body.beta,
        &scene.body.theta,
        &RootTransform::identity(),
    )?;
    let obj = crate::kinematics::object_keypoints(template, &scene.object);
    Ok(assemble_keypoints(&joints, &obj).points)
}

pub fn prior_loss<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
    cams: &VirtualCameraSet,
    flow: &FlowParams,
    f: &ConditionVector,
) -> Result<f64> {
    prior_terms(
        &scene_keypoints(body, template, scene)?,
        &cams.translations,
        flow,
        f,
    )
}

/// Monte-Carlo plausibility: mean over cameras of the flow density.
pub fn score<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
    flow: &FlowParams,
    f: &ConditionVector,
    cams: &VirtualCameraSet,
) -> Result<f64> {
    if cams.translations.is_empty() {
        return Err(Error::Empty("virtual cameras"));
    }
    let kps = scene_keypoints(body, template, scene)?;
    let mut sum = 0.0;
    for t in &cams.translations {
        sum += flow.log_prob(&rep25d_from_points(&kps, t)?, f)?.exp();
    }
    Ok(sum / cams.translations.len() as f64)
}

/// Camera translations of `m` flow samples.
pub fn init_virtual_cameras<R: Rng + ?Sized>(
    flow: &FlowParams,
    f: &ConditionVector,
    m: usize,
    rng: &mut R,
) -> Result<VirtualCameraSet> {
    if m == 0 {
        return Err(Error::InvalidConfig(
            "at least one virtual camera is required".into(),
        ));
    }
    let translations = (0..m)
        .map(|_| flow.sample(f, rng).map(|r| r.cam_translation))
        .collect::<Result<_>>()?;
    Ok(VirtualCameraSet { translations })
}

/// Everything the objective needs besides the variables.
pub struct Problem<'a, M: BodyModel> {
    pub body: &'a M,
    pub template: &'a ObjectTemplate,
    pub obs: &'a Observations,
    pub flow: Option<&'a FlowParams>,
    pub candidates: ContactCandidates,
    pub weights: LossWeights,
    pub weighting: ContactWeighting,
    pub init: SceneParams,
    /// Rotation the chart `δ` is anchored at.
    pub anchor: M3<f64>,
}

impl<'a, M: BodyModel> Problem<'a, M> {
    pub fn n_beta(&self) -> usize {
        self.body.shape_dim()
    }

    pub fn n_theta(&self) -> usize {
        self.body.pose_dim()
    }

    fn cam_offset(&self) -> usize {
        7 + self.n_beta() + self.n_theta()
    }

    /// Variable vector for `scene` (δ = 0) and `cams`.
    pub fn pack(&self, scene: &SceneParams, cams: &VirtualCameraSet) -> Vec<f64> {
        let mut x = vec![0.0; 3];
        x.extend_from_slice(&scene.object.translation);
        x.push(scene.object.scale.ln());
        x.extend_from_slice(&scene.body.beta);
        x.extend_from_slice(&scene.body.theta);
        for t in &cams.translations {
            x.extend_from_slice(t);
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (SceneParams, VirtualCameraSet) {
        let rot = geometry::mat_mul(&geometry::exp_map(&[x[0], x[1], x[2]]), &self.anchor);
        let (nb, nt) = (self.n_beta(), self.n_theta());
        let scene = SceneParams {
            body: BodyParams {
                beta: x[7..7 + nb].to_vec(),
                theta: x[7 + nb..7 + nb + nt].to_vec(),
            },
            object: ObjectPose {
                rotation: rot,
                translation: [x[3], x[4], x[5]],
                scale: x[6].exp(),
            },
        };
        let translations = x[self.cam_offset()..]
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        (scene, VirtualCameraSet { translations })
    }

    /// Weighted objective and its unweighted terms; zero-weight terms are skipped.
    pub fn objective<T: Real>(&self, x: &[T]) -> Result<(T, LossTerms)> {
        let w = &self.weights;
        let (nb, nt) = (self.n_beta(), self.n_theta());
        let beta = &x[7..7 + nb];
        let theta = &x[7 + nb..7 + nb + nt];
        let cams: Vec<V3<T>> = x[self.cam_offset()..]
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let rot = geometry::mat_mul(
            &geometry::exp_map(&[x[0], x[1], x[2]]),
            &geometry::lift_mat(&self.anchor),
        );
        let trans = [x[3], x[4], x[5]];
        let scale = x[6].exp();

        let (joints, verts_h) = self.body.forward(beta, theta, &RootTransform::identity())?;
        let obj_kps = transform_points(&self.template.keypoints_local(), &rot, &trans, scale);

        let mut terms = LossTerms::default();
        let mut total = T::cst(0.0);
        if w.lambda_j > 0.0 {
            let l = reprojection_loss(
                &joints,
                &self.obs.human_keypoints,
                &self.obs.human_confidence,
                &self.obs.camera,
                &self.obs.intrinsics,
            )?;
            terms.human = l.value();
            total = total + l * w.lambda_j;
        }
        if w.lambda_coor > 0.0 {
            let l = reprojection_loss(
                &obj_kps,
                &self.obs.object_keypoints,
                &self.obs.object_confidence,
                &self.obs.camera,
                &self.obs.intrinsics,
            )?;
            terms.object = l.value();
            total = total + l * w.lambda_coor;
        }
        if w.lambda_norm > 0.0 {
            let l = regularization_terms(
                theta,
                beta,
                x[6],
                &self.init.body.theta,
                self.init.object.scale.ln(),
            );
            terms.norm = l.value();
            total = total + l * w.lambda_norm;
        }
        if w.lambda_prior > 0.0 && !cams.is_empty() {
            let flow = self
                .flow
                .ok_or_else(|| Error::InvalidConfig("prior weight set without a flow".into()))?;
            let kps = assemble_keypoints(&joints, &obj_kps);
            let l = prior_terms(&kps.points, &cams, flow, &self.obs.condition)?;
            terms.prior = l.value();
            total = total + l * w.lambda_prior;
        }
        if w.lambda_contact > 0.0 && !self.candidates.is_empty() {
            let verts_o = transform_points(&self.template.mesh.vertices, &rot, &trans, scale);
            let l = contact_loss(&verts_h, &verts_o, &self.candidates, self.weighting);
            terms.contact = l.value();
            total = total + l * w.lambda_contact;
        }
        terms.total = total.value();
        if !terms.total.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        Ok((total, terms))
    }

    /// Objective value and gradient w.r.t. the variables flagged in `free`.
    pub fn value_and_grad(&self, x: &[f64], free: &[bool]) -> Result<(f64, LossTerms, Vec<f64>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = x
            .iter()
            .zip(free)
            .map(|(&v, &f)| if f { tape.var(v) } else { Var::cst(v) })
            .collect();
        let (total, terms) = self.objective(&vars)?;
        let g = tape.gradient(total);
        let grad = vars
            .iter()
            .zip(free)
            .map(|(&v, &f)| if f { g.wrt(v) } else { 0.0 })
            .collect();
        Ok((total.value(), terms, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimDiagnostics {
    /// Weighted objective before every step.
    pub trace: Vec<f64>,
    pub final_terms: LossTerms,
    pub cameras: VirtualCameraSet,
    pub candidates: ContactCandidates,
    pub diverged: bool,
}

/// Occlusion map of `obs` against the rendered meshes of `scene`.
///
/// Silhouettes and depth come from the meshes rendered at `resolution`; the
/// visible-surface masks are the observed ones whenever their size matches.
pub fn observed_occlusion_map<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
    obs: &Observations,
    resolution: usize,
) -> Result<OcclusionMap> {
    let (_, mesh_h) = body.evaluate(&scene.body)?;
    let mesh_o = crate::kinematics::object_mesh(template, &scene.object);
    let mut masks = render_masks(
        &mesh_h,
        &mesh_o,
        &obs.camera,
        &obs.intrinsics,
        resolution,
    )?;
    if obs.person_mask.width == masks.person_mask.width
        && obs.person_mask.height == masks.person_mask.height
    {
        masks.person_mask = obs.person_mask.clone();
        masks.object_mask = obs.object_mask.clone();
    }
    Ok(occlusion::occlusion_from_render(&mesh_h, &mesh_o, &obs.camera, &obs.intrinsics, &masks).0)
}

/// Contact candidates of `obs` against the rendered meshes of `scene`.
pub fn observed_candidates<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
    obs: &Observations,
    mean: &MeanOcclusionMap,
    eta: f64,
) -> Result<ContactCandidates> {
    let map = observed_occlusion_map(body, template, scene, obs, obs.person_mask.width)?;
    contact_candidates(&map, mean, eta)
}

/// Two-phase refinement: object pose only, then everything plus the virtual cameras.
pub fn optimize<M: BodyModel>(
    body: &M,
    template: &ObjectTemplate,
    init: &SceneParams,
    obs: &Observations,
    flow: Option<&FlowParams>,
    mean: Option<&MeanOcclusionMap>,
    cfg: &OptimConfig,
) -> Result<(SceneParams, OptimDiagnostics)> {
    cfg.validate()?;
    init.object.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let cams = match (flow, cfg.weights.lambda_prior > 0.0) {
        (Some(flow), true) => init_virtual_cameras(flow, &obs.condition, cfg.m, &mut rng)?,
        _ => VirtualCameraSet {
            translations: vec![],
        },
    };
    let candidates = match mean {
        Some(mean) if cfg.weights.lambda_contact > 0.0 => {
            observed_candidates(body, template, init, obs, mean, cfg.weights.eta)?
        }
        _ => ContactCandidates::default(),
    };
    let mut problem = Problem {
        body,
        template,
        obs,
        flow,
        candidates,
        weights: cfg.weights,
        weighting: cfg.contact_weighting,
        init: init.clone(),
        anchor: init.object.rotation,
    };

    let mut x = problem.pack(init, &cams);
    let n = x.len();
    let mut trace = Vec::with_capacity(cfg.phase1_steps + cfg.phase2_steps);
    let mut best = (f64::INFINITY, x.clone());
    let mut diverged = false;

    let object_only: Vec<bool> = (0..n).map(|i| i < 7).collect();
    let everything = vec![true; n];
    for (phase, (steps, free)) in [
        (cfg.phase1_steps, &object_only),
        (cfg.phase2_steps, &everything),
    ]
    .into_iter()
    .enumerate()
    {
        if steps == 0 || diverged {
            continue;
        }
        // re-anchor the rotation chart at the current estimate
        let (scene, cams) = problem.unpack(&x);
        problem.anchor = scene.object.rotation;
        x = problem.pack(&scene, &cams);
        best = (f64::INFINITY, x.clone());
        let mut adam = Adam::new(cfg.step_size, n);
        for _ in 0..steps {
            match problem.value_and_grad(&x, free) {
                Ok((v, _, g)) if g.iter().all(|g| g.is_finite()) => {
                    trace.push(v);
                    if v < best.0 {
                        best = (v, x.clone());
                    }
                    adam.step(&mut x, &g);
                }
                Ok(_)
                | Err(Error::NonFinite(_))
                | Err(Error::BehindCamera(_))
                | Err(Error::DegenerateRay(_)) => {
                    warn!("optimization diverged in phase {}", phase + 1);
                    diverged = true;
                    x = best.1.clone();
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        debug!("phase {} done, objective {:?}", phase + 1, trace.last());
    }

    let final_terms = match problem.value_and_grad(&x, &vec![false; n]) {
        Ok((_, terms, _)) => terms,
        Err(_) => {
            diverged = true;
            x = best.1.clone();
            problem.objective(&x).map(|(_, t)| t).unwrap_or_default()
        }
    };
    let (scene, cameras) = problem.unpack(&x);
    let diag = OptimDiagnostics {
        trace,
        final_terms,
        cameras,
        candidates: problem.candidates.clone(),
        diverged,
    };
    Ok((scene, diag))
}
