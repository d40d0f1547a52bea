//! Behaviour of a flow trained on a small synthetic suite with cameras on a
//! 2 m ring. The suite and the trained flows are shared across tests.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use hoi_prior::evaluation::median;
use hoi_prior::flow::{self, mean_nll, ConditionVector, FlowConfig, FlowParams};
use hoi_prior::geometry::{self, V3};
use hoi_prior::grouping::GroupingConfig;
use hoi_prior::kinematics::{object_mesh, BodyModel, ObjectPose, ObjectTemplate, SceneParams, StickBodyModel};
use hoi_prior::optimizer::occlusion::occlusion_map;
use hoi_prior::optimizer::{init_virtual_cameras, prior_loss, score};
use hoi_prior::pipeline::run::{stage_group, training_items};
use hoi_prior::pipeline::{synth_generate, SyntheticFamilyConfig, SyntheticSuite};

struct Trained {
    suite: SyntheticSuite,
    /// `(condition, flattened targets)` of training images.
    train: Vec<(ConditionVector, Vec<Vec<f64>>)>,
    /// Same for images of held-out scenes.
    held_out: Vec<(ConditionVector, Vec<Vec<f64>>)>,
    /// Actnorm-initialized, otherwise untrained.
    initial: FlowParams,
    /// `(epochs, params)` for 1, 5 and 30 epochs.
    by_epochs: Vec<(usize, FlowParams)>,
}

impl Trained {
    fn final_flow(&self) -> &FlowParams {
        &self.by_epochs.last().unwrap().1
    }
}

fn borrow(data: &[(ConditionVector, Vec<Vec<f64>>)]) -> Vec<(&ConditionVector, Vec<Vec<f64>>)> {
    data.iter().map(|(f, t)| (f, t.clone())).collect()
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SyntheticFamilyConfig {
            n_families: 4,
            n_scenes: 10,
            views_per_scene: 10,
            test_scenes: 20,
            ring_radius: 2.0,
            ring_radius_jitter: 0.2,
            rng_seed: 5,
            ..Default::default()
        };
        let suite = synth_generate(&cfg, &StickBodyModel::standard(), &ObjectTemplate::standard()).unwrap();
        let groups = stage_group(&suite.train, &GroupingConfig::default()).unwrap();
        let items = training_items(&suite.train, &groups).unwrap();
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (rec, item) in suite.train.records.iter().zip(items) {
            if item.cluster.is_empty() {
                continue;
            }
            let scene: usize = rec.image_id.split('_').nth(1).unwrap()[1..].parse().unwrap();
            let entry = (item.condition.clone(), flow::cluster_targets(&item.cluster));
            if scene >= 8 { held_out.push(entry) } else { train.push(entry) }
        }
        let base = FlowConfig { rng_seed: 1, ..Default::default() };
        let fit = |epochs: usize, lr: f64| {
            flow::train_flat(&borrow(&train), &FlowConfig { epochs, lr, ..base.clone() }).unwrap().params
        };
        let initial = fit(1, 0.0);
        let by_epochs = [1, 5, 30].iter().map(|&e| (e, fit(e, base.lr))).collect();
        Trained { suite, train, held_out, initial, by_epochs }
    })
}

#[test]
fn training_lowers_the_nll_by_two_nats() {
    let t = trained();
    let before = mean_nll(&t.initial, &borrow(&t.train)).unwrap();
    let after = mean_nll(t.final_flow(), &borrow(&t.train)).unwrap();
    assert!(before - after >= 2.0, "mean nll {before:.2} -> {after:.2}");
}

#[test]
fn held_out_log_prob_improves_with_epochs() {
    let t = trained();
    let nll: Vec<f64> = t.by_epochs.iter().map(|(_, p)| mean_nll(p, &borrow(&t.held_out)).unwrap()).collect();
    assert!(nll.windows(2).all(|w| w[1] < w[0]), "held-out nll after 1/5/30 epochs: {nll:?}");
}

fn sampled_cameras(flow: &FlowParams, per_image: usize, seed: u64) -> Vec<V3<f64>> {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.suite
        .test
        .records
        .iter()
        .flat_map(|r| init_virtual_cameras(flow, &r.condition, per_image, &mut rng).unwrap().translations)
        .collect()
}

#[test]
fn sampled_cameras_stay_near_the_ring() {
    let cams = sampled_cameras(trained().final_flow(), 50, 2);
    let inside = cams.iter().filter(|c| (1.0..=3.0).contains(&geometry::norm(c))).count();
    let frac = inside as f64 / cams.len() as f64;
    assert!(frac >= 0.9, "{frac:.3} of camera draws within [1, 3] m");
}

/// `p` lies outside the hull of `points` iff some direction separates them;
/// probed with many random directions.
fn in_hull(p: &V3<f64>, points: &[V3<f64>], dirs: &[V3<f64>]) -> bool {
    dirs.iter().all(|u| {
        let reach = points.iter().map(|x| geometry::dot(u, x)).fold(f64::NEG_INFINITY, f64::max);
        geometry::dot(u, p) <= reach
    })
}

#[test]
fn sampled_cameras_stay_in_the_dilated_training_hull() {
    let t = trained();
    let train_cams: Vec<V3<f64>> = t.suite.train.records.iter().map(|r| r.camera.translation).collect();
    let n = train_cams.len() as f64;
    let centroid = train_cams.iter().fold([0.0; 3], |a, c| geometry::add(&a, &geometry::scale(c, 1.0 / n)));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dirs: Vec<V3<f64>> = (0..2000).map(|_| geometry::random_unit(&mut rng)).collect();
    let cams = sampled_cameras(t.final_flow(), 20, 4);
    // inside the hull scaled by 1.5 about its centroid
    let inside = cams
        .iter()
        .filter(|c| {
            let shrunk = geometry::add(&centroid, &geometry::scale(&geometry::sub(c, &centroid), 1.0 / 1.5));
            in_hull(&shrunk, &train_cams, &dirs)
        })
        .count();
    let frac = inside as f64 / cams.len() as f64;
    assert!(frac >= 0.95, "{frac:.3} of camera draws inside the dilated hull");
}

fn test_scenes() -> Vec<(&'static SceneParams, &'static SceneParams, &'static ConditionVector)> {
    trained()
        .suite
        .test
        .records
        .iter()
        .map(|r| (r.ground_truth.as_ref().unwrap(), r.init.as_ref().unwrap(), &r.condition))
        .collect()
}

#[test]
fn ground_truth_outscores_a_shifted_object() {
    let t = trained();
    let flow = t.final_flow();
    let (body, template) = (&t.suite.test.header.body, &t.suite.test.header.object);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut wins, mut trials) = (0, 0);
    for (gt, _, f) in test_scenes() {
        for _ in 0..5 {
            let cams = init_virtual_cameras(flow, f, 8, &mut rng).unwrap();
            let mut shifted = gt.clone();
            shifted.object.translation =
                geometry::add(&gt.object.translation, &geometry::scale(&geometry::random_unit(&mut rng), 0.5));
            let a = score(body, template, gt, flow, f, &cams).unwrap();
            let b = score(body, template, &shifted, flow, f, &cams).unwrap();
            wins += usize::from(a > b);
            trials += 1;
        }
    }
    let frac = wins as f64 / trials as f64;
    assert!(frac >= 0.9, "ground truth wins {wins}/{trials}");
}

fn interpolate(from: &ObjectPose, to: &ObjectPose, a: f64) -> ObjectPose {
    let rel = geometry::log_map(&geometry::mat_mul(&to.rotation, &geometry::transpose(&from.rotation)));
    ObjectPose {
        rotation: geometry::mat_mul(&geometry::exp_map(&geometry::scale(&rel, a)), &from.rotation),
        translation: geometry::add(
            &geometry::scale(&from.translation, 1.0 - a),
            &geometry::scale(&to.translation, a),
        ),
        scale: from.scale + a * (to.scale - from.scale),
    }
}

#[test]
fn prior_loss_falls_along_the_segment_to_ground_truth() {
    let t = trained();
    let flow = t.final_flow();
    let (body, template) = (&t.suite.test.header.body, &t.suite.test.header.object);
    let steps = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut losses = vec![Vec::new(); steps.len()];
    let scenes = test_scenes();
    assert_eq!(scenes.len(), 20);
    for (gt, init, f) in scenes {
        let cams = init_virtual_cameras(flow, f, 8, &mut rng).unwrap();
        for (k, &a) in steps.iter().enumerate() {
            let scene = SceneParams { body: gt.body.clone(), object: interpolate(&init.object, &gt.object, a) };
            losses[k].push(prior_loss(body, template, &scene, &cams, flow, f).unwrap());
        }
    }
    let medians: Vec<f64> = losses.iter_mut().map(|v| median(v)).collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "median prior loss along the segment: {medians:?}");
}

#[test]
fn single_point_nll_reaches_the_noise_entropy() {
    let cfg = FlowConfig { dequant_sigma: 0.05, rng_seed: 8, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let point: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cond = ConditionVector::new((0..cfg.cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let out = flow::train_flat(&[(&cond, vec![point.clone(); 1024])], &cfg).unwrap();
    let d = cfg.input_dim as f64;
    let entropy = 0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E * cfg.dequant_sigma.powi(2)).ln();
    // cross-entropy of the noise distribution under the trained flow
    let draws = 20_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let x: Vec<f64> = point.iter().map(|p| p + cfg.dequant_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        total -= out.params.log_prob_flat(&x, &cond).unwrap();
    }
    let gap = total / draws as f64 - entropy;
    assert!(gap.abs() < 0.5, "cross-entropy exceeds the noise entropy {entropy:.2} by {gap:.3} nats");
}

#[test]
fn zero_coupling_flow_samples_are_standard_normal() {
    let cfg = FlowConfig { input_dim: 6, cond_dim: 2, rng_seed: 10, ..Default::default() };
    let p = FlowParams::new(&cfg).unwrap();
    let f = ConditionVector::new(vec![0.3, -0.7]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| p.sample_flat(&f, &mut rng).unwrap()).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    // asymptotic Kolmogorov critical value at α = 0.01
    let critical = (-(0.01f64 / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt();
    for c in 0..cfg.input_dim {
        let mut col: Vec<f64> = draws.iter().map(|x| x[c]).collect();
        col.sort_by(f64::total_cmp);
        let stat = col.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
            let cdf = normal.cdf(x);
            m.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs())
        });
        assert!(stat < critical, "coordinate {c}: KS statistic {stat:.4} ≥ {critical:.4}");
    }
}

#[test]
fn occlusion_maps_agree_across_render_resolutions() {
    let t = trained();
    let body = &t.suite.test.header.body;
    let template = &t.suite.test.header.object;
    for rec in &t.suite.test.records {
        let gt = rec.ground_truth.as_ref().unwrap();
        let (_, mesh_h) = body.evaluate(&gt.body).unwrap();
        let mesh_o = object_mesh(template, &gt.object);
        let a = occlusion_map(&mesh_h, &mesh_o, &rec.camera, &rec.intrinsics, 256).unwrap();
        let b = occlusion_map(&mesh_h, &mesh_o, &rec.camera, &rec.intrinsics, 512).unwrap();
        let flags = |m: &hoi_prior::optimizer::occlusion::OcclusionMap| [m.human.clone(), m.object.clone()].concat();
        let (fa, fb) = (flags(&a), flags(&b));
        let same = fa.iter().zip(&fb).filter(|(x, y)| x == y).count();
        let agreement = same as f64 / fa.len() as f64;
        assert!(agreement >= 0.95, "{}: {agreement:.3} vertex agreement", rec.image_id);
    }
}
