//! Synthetic multi-view interaction generator.
//!
//! A family is a base interaction: body shape and pose plus an object held at
//! a fixed offset from one anchor joint. Each scene jitters the family's pose
//! and object placement; all views of one scene share its 3D configuration and
//! differ only in the camera, which sits on a jittered ring around the body.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetHeader, DatasetRecord};
use crate::error::{Error, Result};
use crate::flow::condition_from_keypoints;
use crate::geometry::{self, V3};
use crate::kinematics::{
    object_keypoints, object_mesh, BodyModel, BodyParams, ObjectPose, ObjectTemplate, SceneParams,
    StickBodyModel,
};
use crate::optimizer::render_masks;
use crate::projection::{project, CameraPose, Intrinsics, Keypoints2D};

/// Joints an object can be attached to, cycled through by family index.
const ANCHORS: [&str; 4] = ["right_wrist", "left_wrist", "spine3", "pelvis"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFamilyConfig {
    pub n_families: usize,
    /// Training scenes per family.
    pub n_scenes: usize,
    pub views_per_scene: usize,
    /// Held-out scenes, one view each, spread round-robin over families.
    pub test_scenes: usize,
    pub ring_radius: f64,
    pub ring_radius_jitter: f64,
    pub camera_height_jitter: f64,
    /// Std of each family's base pose angles (rad).
    pub base_pose_spread: f64,
    /// Std of per-scene pose angle jitter (rad).
    pub body_pose_jitter: f64,
    pub object_rotation_jitter: f64,
    pub object_translation_jitter: f64,
    /// Std of the pixel noise added to every keypoint.
    pub keypoint_noise: f64,
    /// Object perturbation of test initializations.
    pub init_rotation_deg: f64,
    pub init_translation: f64,
    pub mask_resolution: usize,
    pub focal: f64,
    pub image_size: u32,
    pub rng_seed: u64,
}

impl Default for SyntheticFamilyConfig {
    fn default() -> Self {
        SyntheticFamilyConfig {
            n_families: 8,
            n_scenes: 25,
            views_per_scene: 10,
            test_scenes: 20,
            ring_radius: 3.0,
            ring_radius_jitter: 0.3,
            camera_height_jitter: 0.4,
            base_pose_spread: 0.25,
            body_pose_jitter: 0.01,
            object_rotation_jitter: 0.03,
            object_translation_jitter: 0.01,
            keypoint_noise: 1.0,
            init_rotation_deg: 20.0,
            init_translation: 0.3,
            mask_resolution: 256,
            focal: 1000.0,
            image_size: 1000,
            rng_seed: 0,
        }
    }
}

impl SyntheticFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_families == 0
            || self.n_scenes == 0
            || self.views_per_scene == 0
            || self.mask_resolution == 0
        {
            return Err(Error::InvalidConfig(
                "family, scene, view counts and mask resolution must be positive".into(),
            ));
        }
        let nonneg = [
            self.ring_radius_jitter,
            self.camera_height_jitter,
            self.base_pose_spread,
            self.body_pose_jitter,
            self.object_rotation_jitter,
            self.object_translation_jitter,
            self.keypoint_noise,
            self.init_rotation_deg,
            self.init_translation,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig(
                "jitter and noise levels must be nonnegative".into(),
            ));
        }
        if !(self.ring_radius > self.ring_radius_jitter)
            || !(self.focal > 0.0)
            || self.image_size == 0
        {
            return Err(Error::InvalidConfig(
                "ring radius, focal length and image size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(self.focal, self.image_size, self.image_size)
    }
}

/// Base interaction of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub body: BodyParams,
    pub anchor: usize,
    /// Object center relative to the anchor joint.
    pub offset: V3<f64>,
    pub rotation: [[f64; 3]; 3],
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

pub fn sample_family(
    body: &StickBodyModel,
    index: usize,
    cfg: &SyntheticFamilyConfig,
    rng: &mut ChaCha8Rng,
) -> Family {
    let name = ANCHORS[index % ANCHORS.len()];
    let anchor = body.names.iter().position(|n| n == name).unwrap_or(0);
    let params = BodyParams {
        beta: (0..body.shape_dim()).map(|_| gauss(rng, 0.5)).collect(),
        theta: (0..body.pose_dim())
            .map(|_| gauss(rng, cfg.base_pose_spread))
            .collect(),
    };
    let dir = geometry::random_unit(rng);
    let offset = geometry::scale(&dir, rng.random_range(0.15..0.3));
    Family {
        body: params,
        anchor,
        offset,
        rotation: geometry::random_rotation(rng),
    }
}

/// One jittered instance of a family.
pub fn sample_scene(
    body: &StickBodyModel,
    family: &Family,
    cfg: &SyntheticFamilyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SceneParams> {
    let params = BodyParams {
        beta: family.body.beta.clone(),
        theta: family
            .body
            .theta
            .iter()
            .map(|t| t + gauss(rng, cfg.body_pose_jitter))
            .collect(),
    };
    let (joints, _) = body.evaluate(&params)?;
    let w = [
        gauss(rng, cfg.object_rotation_jitter),
        gauss(rng, cfg.object_rotation_jitter),
        gauss(rng, cfg.object_rotation_jitter),
    ];
    let jitter = [
        gauss(rng, cfg.object_translation_jitter),
        gauss(rng, cfg.object_translation_jitter),
        gauss(rng, cfg.object_translation_jitter),
    ];
    let translation = geometry::add(
        &geometry::add(&joints[family.anchor], &family.offset),
        &jitter,
    );
    Ok(SceneParams {
        body: params,
        object: ObjectPose {
            rotation: geometry::mat_mul(&geometry::exp_map(&w), &family.rotation),
            translation,
            scale: 1.0,
        },
    })
}

/// Camera on the jittered ring, looking at the body's joint centroid.
pub fn sample_camera(
    joints: &[V3<f64>],
    cfg: &SyntheticFamilyConfig,
    rng: &mut ChaCha8Rng,
) -> CameraPose {
    let mut center = [0.0; 3];
    for j in joints {
        center = geometry::add(&center, j);
    }
    let center = geometry::scale(&center, 1.0 / joints.len() as f64);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let r = cfg.ring_radius + rng.random_range(-1.0..=1.0) * cfg.ring_radius_jitter;
    let h = rng.random_range(-1.0..=1.0) * cfg.camera_height_jitter;
    let eye = [
        center[0] + r * phi.sin(),
        center[1] + h,
        center[2] + r * phi.cos(),
    ];
    CameraPose::look_at(eye, center, [0.0, 1.0, 0.0])
}

fn noisy(kps: Keypoints2D, sigma: f64, rng: &mut ChaCha8Rng) -> Keypoints2D {
    if sigma == 0.0 {
        return kps;
    }
    Keypoints2D {
        points: kps
            .points
            .into_iter()
            .map(|p| [p[0] + gauss(rng, sigma), p[1] + gauss(rng, sigma)])
            .collect(),
    }
}

/// Renders and projects one view of `scene`.
pub fn make_record(
    body: &StickBodyModel,
    template: &ObjectTemplate,
    scene: &SceneParams,
    camera: CameraPose,
    image_id: String,
    cfg: &SyntheticFamilyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetRecord> {
    let intr = cfg.intrinsics();
    let (joints, mesh_h) = body.evaluate(&scene.body)?;
    let mesh_o = object_mesh(template, &scene.object);
    let human = noisy(project(&joints, &camera, &intr)?, cfg.keypoint_noise, rng);
    let object = noisy(
        project(&object_keypoints(template, &scene.object), &camera, &intr)?,
        cfg.keypoint_noise,
        rng,
    );
    let masks = render_masks(&mesh_h, &mesh_o, &camera, &intr, cfg.mask_resolution)?;
    let all = Keypoints2D {
        points: human.points.iter().chain(&object.points).copied().collect(),
    };
    Ok(DatasetRecord {
        image_id,
        intrinsics: intr,
        camera,
        human_confidence: vec![1.0; human.points.len()],
        object_confidence: vec![1.0; object.points.len()],
        human_keypoints: human,
        object_keypoints: object,
        person_mask: masks.person_mask,
        object_mask: masks.object_mask,
        condition: condition_from_keypoints(&all, &intr),
        ground_truth: Some(scene.clone()),
        init: None,
    })
}

/// Object pose rotated by `degrees` about a random axis and shifted by
/// `distance` in a random direction.
pub fn perturb_object(
    pose: &ObjectPose,
    degrees: f64,
    distance: f64,
    rng: &mut ChaCha8Rng,
) -> ObjectPose {
    let axis = geometry::random_unit(rng);
    let shift = geometry::random_unit(rng);
    ObjectPose {
        rotation: geometry::mat_mul(
            &geometry::exp_map(&geometry::scale(&axis, degrees.to_radians())),
            &pose.rotation,
        ),
        translation: geometry::add(&pose.translation, &geometry::scale(&shift, distance)),
        scale: pose.scale,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub families: Vec<Family>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Training views of every family plus held-out single-view test scenes
/// carrying perturbed initializations.
pub fn synth_generate(
    cfg: &SyntheticFamilyConfig,
    body: &StickBodyModel,
    template: &ObjectTemplate,
) -> Result<SyntheticSuite> {
    cfg.validate()?;
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let families: Vec<Family> = (0..cfg.n_families)
        .map(|i| sample_family(body, i, cfg, &mut rng))
        .collect();
    let header = DatasetHeader::new(body.clone(), template.clone(), cfg.mask_resolution);

    let mut train = Vec::with_capacity(cfg.n_families * cfg.n_scenes * cfg.views_per_scene);
    for (fi, fam) in families.iter().enumerate() {
        for si in 0..cfg.n_scenes {
            let scene = sample_scene(body, fam, cfg, &mut rng)?;
            let (joints, _) = body.evaluate(&scene.body)?;
            for vi in 0..cfg.views_per_scene {
                let cam = sample_camera(&joints, cfg, &mut rng);
                train.push(make_record(
                    body,
                    template,
                    &scene,
                    cam,
                    format!("f{fi}_s{si}_v{vi}"),
                    cfg,
                    &mut rng,
                )?);
            }
        }
    }

    let mut test = Vec::with_capacity(cfg.test_scenes);
    for i in 0..cfg.test_scenes {
        let fi = i % cfg.n_families;
        let scene = sample_scene(body, &families[fi], cfg, &mut rng)?;
        let (joints, _) = body.evaluate(&scene.body)?;
        let cam = sample_camera(&joints, cfg, &mut rng);
        let mut rec = make_record(
            body,
            template,
            &scene,
            cam,
            format!("f{fi}_t{i}"),
            cfg,
            &mut rng,
        )?;
        let object = perturb_object(
            &scene.object,
            cfg.init_rotation_deg,
            cfg.init_translation,
            &mut rng,
        );
        rec.init = Some(SceneParams {
            body: scene.body.clone(),
            object,
        });
        test.push(rec);
    }

    Ok(SyntheticSuite {
        families,
        train: Dataset {
            header: header.clone(),
            records: train,
        },
        test: Dataset {
            header,
            records: test,
        },
    })
}
