use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hoi_prior::annotation::region_chamfer;
use hoi_prior::evaluation::{chamfer, procrustes_align, PointCloud};
use hoi_prior::flow::{ConditionVector, FlowConfig, FlowParams};
use hoi_prior::geometry::{self, V3};
use hoi_prior::grouping::{knn_group, ray_pair_distance, rep_distance, DatasetIndex, DatasetItem, GroupingConfig};
use hoi_prior::kinematics::{
    object_keypoints, transform_points, BodyModel, BodyParams, ObjectPose, ObjectTemplate, RootTransform,
    SceneParams, StickBodyModel,
};
use hoi_prior::optimizer::occlusion::{mean_occlusion_map, OcclusionMap};
use hoi_prior::optimizer::{regularization, reprojection_loss};
use hoi_prior::projection::{project, rep25d_from_2d, rep25d_from_points, CameraPose, Intrinsics};

fn vec3(range: f64) -> impl Strategy<Value = V3<f64>> {
    prop::array::uniform3(-range..range)
}

fn rotation() -> impl Strategy<Value = [[f64; 3]; 3]> {
    any::<u64>().prop_map(|s| geometry::random_rotation(&mut ChaCha8Rng::seed_from_u64(s)))
}

fn close(a: &V3<f64>, b: &V3<f64>, tol: f64) -> bool {
    geometry::norm(&geometry::sub(a, b)) <= tol
}

fn random_body(seed: u64, body: &StickBodyModel) -> BodyParams {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    BodyParams {
        beta: (0..body.shape_dim()).map(|_| r.random_range(-0.5..0.5)).collect(),
        theta: (0..body.pose_dim()).map(|_| r.random_range(-0.4..0.4)).collect(),
    }
}

/// Camera on a sphere around the origin looking at it.
fn camera(seed: u64) -> CameraPose {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dir = geometry::random_unit(&mut r);
    let dist = r.random_range(2.5..4.0);
    CameraPose::look_at(geometry::scale(&dir, dist), [0.0; 3], [0.0, 1.0, 0.0])
}

fn small_flow(seed: u64) -> FlowParams {
    let cfg = FlowConfig { depth: 3, width: 12, input_dim: 9, cond_dim: 4, rng_seed: seed, ..Default::default() };
    let mut p = FlowParams::new(&cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for b in p.blocks_mut() {
        for v in b.iter_mut() {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_kinematics_is_equivariant_under_root_motion(seed in any::<u64>(), rot in rotation(), t in vec3(2.0)) {
        let body = StickBodyModel::standard();
        let p = random_body(seed, &body);
        let (j0, v0) = body.forward(&p.beta, &p.theta, &RootTransform::identity()).unwrap();
        let (j1, v1) = body.forward(&p.beta, &p.theta, &RootTransform { rotation: rot, translation: t }).unwrap();
        for (a, b) in j0.iter().chain(&v0).zip(j1.iter().chain(&v1)) {
            let moved = geometry::add(&geometry::mat_vec(&rot, a), &t);
            prop_assert!(close(&moved, b, 1e-10));
        }
    }

    #[test]
    fn object_keypoints_scale_linearly(rot in rotation(), t in vec3(1.0), s in 0.2f64..3.0) {
        let template = ObjectTemplate::standard();
        let unit = object_keypoints(&template, &ObjectPose { rotation: rot, translation: t, scale: 1.0 });
        let scaled = object_keypoints(&template, &ObjectPose { rotation: rot, translation: t, scale: s });
        for (u, v) in unit.iter().zip(&scaled) {
            let expect = geometry::add(&geometry::scale(&geometry::sub(u, &t), s), &t);
            prop_assert!(close(&expect, v, 1e-12));
        }
    }

    #[test]
    fn rays_from_pixels_match_rays_from_points(seed in any::<u64>(), cam_seed in any::<u64>()) {
        let body = StickBodyModel::standard();
        let (joints, _) = body.evaluate(&random_body(seed, &body)).unwrap();
        let cam = camera(cam_seed);
        let intr = Intrinsics::default();
        let from_pixels = rep25d_from_2d(&project(&joints, &cam, &intr).unwrap(), &cam, &intr);
        let from_points = rep25d_from_points(&joints, &cam.translation).unwrap();
        for (a, b) in from_pixels.directions.iter().zip(&from_points.directions) {
            prop_assert!(close(a, b, 1e-12));
        }
        prop_assert_eq!(from_pixels.cam_translation, from_points.cam_translation);
    }

    #[test]
    fn projection_ignores_global_scale(seed in any::<u64>(), cam_seed in any::<u64>(), s in 0.1f64..10.0) {
        let body = StickBodyModel::standard();
        let (joints, _) = body.evaluate(&random_body(seed, &body)).unwrap();
        let cam = camera(cam_seed);
        let big_cam = CameraPose { rotation: cam.rotation, translation: geometry::scale(&cam.translation, s) };
        let big: Vec<V3<f64>> = joints.iter().map(|p| geometry::scale(p, s)).collect();
        let intr = Intrinsics::default();
        let a = project(&joints, &cam, &intr).unwrap();
        let b = project(&big, &big_cam, &intr).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p[0] - q[0]).abs() < 1e-8 && (p[1] - q[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn ray_distance_is_symmetric_and_nonnegative(d in vec3(1.0), d2 in vec3(1.0), t in vec3(3.0), t2 in vec3(3.0)) {
        prop_assume!(geometry::norm(&d) > 1e-3 && geometry::norm(&d2) > 1e-3);
        let (d, d2) = (geometry::normalize(&d), geometry::normalize(&d2));
        let a = ray_pair_distance(&d, &t, &d2, &t2);
        let b = ray_pair_distance(&d2, &t2, &d, &t);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn two_exact_views_of_one_scene_are_at_distance_zero(seed in any::<u64>(), c1 in any::<u64>(), c2 in any::<u64>()) {
        let body = StickBodyModel::standard();
        let (joints, _) = body.evaluate(&random_body(seed, &body)).unwrap();
        let intr = Intrinsics::default();
        let rep = |c: &CameraPose| rep25d_from_2d(&project(&joints, c, &intr).unwrap(), c, &intr);
        prop_assert!(rep_distance(&rep(&camera(c1)), &rep(&camera(c2))).unwrap() < 1e-9);
    }

    #[test]
    fn mean_occlusion_is_the_exact_frequency(bits in prop::collection::vec(prop::collection::vec(0u8..2, 7), 1..40)) {
        let maps: Vec<OcclusionMap> = bits.iter().map(|b| OcclusionMap { human: b.clone(), object: b[..3].to_vec() }).collect();
        let mean = mean_occlusion_map(&maps).unwrap();
        for v in 0..7 {
            let ones = bits.iter().filter(|b| b[v] == 1).count();
            prop_assert_eq!(mean.human[v], ones as f64 / bits.len() as f64);
            prop_assert!((0.0..=1.0).contains(&mean.human[v]));
        }
    }

    #[test]
    fn region_chamfer_is_symmetric(a in prop::collection::vec(vec3(1.0), 1..20), b in prop::collection::vec(vec3(1.0), 1..20)) {
        let ab: f64 = region_chamfer(&a, &b).unwrap();
        let ba: f64 = region_chamfer(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(region_chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_is_symmetric(a in prop::collection::vec(vec3(1.0), 1..30), b in prop::collection::vec(vec3(1.0), 1..30)) {
        let (a, b) = (PointCloud { points: a }, PointCloud { points: b });
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert!(chamfer(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn aligned_chamfer_ignores_rigid_motion(
        a in prop::collection::vec(vec3(1.0), 6..30),
        noise in prop::collection::vec(vec3(0.05), 30),
        rot in rotation(),
        t in vec3(3.0),
    ) {
        let b: Vec<V3<f64>> = a.iter().zip(&noise).map(|(p, n)| geometry::add(p, n)).collect();
        let (a, b) = (PointCloud { points: a }, PointCloud { points: b });
        let aligned = |x: &PointCloud, y: &PointCloud| {
            let tf = procrustes_align(x, y).unwrap();
            chamfer(&PointCloud { points: tf.apply_all(&x.points) }, y).unwrap()
        };
        let moved = PointCloud { points: transform_points(&a.points, &rot, &t, 1.0) };
        prop_assert!((aligned(&a, &b) - aligned(&moved, &b)).abs() < 1e-9);
    }

    #[test]
    fn rotation_error_is_bounded(r1 in rotation(), r2 in rotation()) {
        let e = geometry::rotation_angle_between(&r1, &r2);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&e));
        prop_assert!((e - geometry::rotation_angle_between(&r2, &r1)).abs() < 1e-12);
        prop_assert_eq!(geometry::rotation_angle_between(&r1, &r1), 0.0);
    }

    #[test]
    fn reprojection_and_regularization_vanish_only_at_the_data(seed in any::<u64>(), cam_seed in any::<u64>(), shift in vec3(0.2)) {
        let body = StickBodyModel::standard();
        let template = ObjectTemplate::standard();
        let scene = SceneParams {
            body: random_body(seed, &body),
            object: ObjectPose { rotation: geometry::identity(), translation: [0.1, 0.2, 0.3], scale: 1.0 },
        };
        let cam = camera(cam_seed);
        let intr = Intrinsics::default();
        let pts = object_keypoints(&template, &scene.object);
        let obs = project(&pts, &cam, &intr).unwrap();
        let conf = vec![1.0; pts.len()];
        prop_assert_eq!(reprojection_loss(&pts, &obs, &conf, &cam, &intr).unwrap(), 0.0);
        let off: Vec<V3<f64>> = pts.iter().map(|p| geometry::add(p, &shift)).collect();
        prop_assert!(reprojection_loss(&off, &obs, &conf, &cam, &intr).unwrap() >= 0.0);
        // the shape term pulls β toward the mean shape, not toward init
        let mut mean_shape = scene.clone();
        mean_shape.body.beta.iter_mut().for_each(|b| *b = 0.0);
        prop_assert_eq!(regularization(&mean_shape, &mean_shape), 0.0);
        prop_assert!(regularization(&scene, &scene) >= 0.0);
        let mut moved = scene.clone();
        moved.object.scale = 1.0 + shift[0].abs();
        prop_assert!(regularization(&moved, &scene) >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_inverse_undoes_forward(seed in 0u64..1000, xs in prop::collection::vec(-3.0f64..3.0, 9), fs in prop::collection::vec(-1.0f64..1.0, 4)) {
        let p = small_flow(seed);
        let f = ConditionVector::new(fs);
        let (z, _) = p.forward(&xs, &f).unwrap();
        let back = p.inverse(&z, &f).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoints_reproduce_log_probs_bitwise(seed in 0u64..1000, xs in prop::collection::vec(-3.0f64..3.0, 9)) {
        let p = small_flow(seed);
        let q = FlowParams::from_checkpoint_json(&p.to_checkpoint_json().unwrap()).unwrap();
        let f = ConditionVector::new(vec![0.1, -0.2, 0.3, 0.0]);
        prop_assert_eq!(p.log_prob_flat(&xs, &f).unwrap().to_bits(), q.log_prob_flat(&xs, &f).unwrap().to_bits());
    }
}

/// Small grouping input: jittered views of a few random scenes.
fn grouping_index(seed: u64) -> DatasetIndex {
    let body = StickBodyModel::standard();
    let intr = Intrinsics::default();
    let mut items = Vec::new();
    for s in 0..4 {
        let (joints, _) = body.evaluate(&random_body(seed.wrapping_add(s), &body)).unwrap();
        for v in 0..8 {
            let cam = camera(seed ^ (s * 100 + v));
            let keypoints = project(&joints, &cam, &intr).unwrap();
            items.push(DatasetItem {
                image_id: format!("s{s}_v{v}"),
                rep: rep25d_from_2d(&keypoints, &cam, &intr),
                keypoints,
                camera: cam,
                intrinsics: intr,
            });
        }
    }
    DatasetIndex { items }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn grouping_is_consistent_and_reproducible(seed in any::<u64>()) {
        let index = grouping_index(seed);
        let cfg = GroupingConfig { k: 4, n_iter: 3, rng_seed: seed, ..Default::default() };
        let a = knn_group(&index, &cfg).unwrap();
        prop_assert!(a.is_consistent());
        prop_assert!(a.neighbors.iter().all(|n| n.len() == 4));
        prop_assert_eq!(a, knn_group(&index, &cfg).unwrap());
    }
}
