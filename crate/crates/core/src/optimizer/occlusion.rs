//! Per-vertex occlusion maps, their dataset mean, contact candidates and the
//! weighted contact chamfer.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{self, V3};
use crate::kinematics::Mesh;
use crate::projection::{CameraPose, Intrinsics};

use super::render::{render_masks, MaskGrid, Raster, RenderGrid, RenderedMasks};

/// Front/back surface tolerance against the z-buffer, meters.
pub const EPS_Z: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub human: Vec<u8>,
    pub object: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanOcclusionMap {
    pub human: Vec<f64>,
    pub object: Vec<f64>,
    pub count: usize,
}

/// Which rule marked a vertex; front and back sets are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Front,
    Back,
    Outside,
}

/// Per-vertex surface class and occlusion flag for one mesh.
fn classify(
    mesh: &Mesh,
    cam: &CameraPose,
    grid: &RenderGrid,
    own: &Raster,
    own_visible: &MaskGrid,
    region: &MaskGrid,
) -> (Vec<u8>, Vec<Surface>) {
    let mut flags = Vec::with_capacity(mesh.vertices.len());
    let mut surfaces = Vec::with_capacity(mesh.vertices.len());
    for v in &mesh.vertices {
        let c = cam.to_camera(v);
        let Some(i) = grid.cell(&c) else {
            flags.push(0);
            surfaces.push(Surface::Outside);
            continue;
        };
        let front = c[2] <= own.depth[i] + EPS_Z;
        let occluded = if front {
            region.data[i] && !own_visible.data[i]
        } else {
            region.data[i] && own_visible.data[i]
        };
        flags.push(occluded as u8);
        surfaces.push(if front { Surface::Front } else { Surface::Back });
    }
    (flags, surfaces)
}

/// Occlusion map from already rendered masks, plus the surface class of every
/// human and object vertex.
pub fn occlusion_from_render(
    mesh_h: &Mesh,
    mesh_o: &Mesh,
    cam: &CameraPose,
    intr: &Intrinsics,
    masks: &RenderedMasks,
) -> (OcclusionMap, Vec<Surface>, Vec<Surface>) {
    let grid = RenderGrid {
        intrinsics: *intr,
        resolution: masks.person_mask.width,
    };
    let (human, sh) = classify(
        mesh_h,
        cam,
        &grid,
        &masks.human,
        &masks.person_mask,
        &masks.occlusion_region,
    );
    let (object, so) = classify(
        mesh_o,
        cam,
        &grid,
        &masks.object,
        &masks.object_mask,
        &masks.occlusion_region,
    );
    (OcclusionMap { human, object }, sh, so)
}

pub fn occlusion_map(
    mesh_h: &Mesh,
    mesh_o: &Mesh,
    cam: &CameraPose,
    intr: &Intrinsics,
    resolution: usize,
) -> Result<OcclusionMap> {
    let masks = render_masks(mesh_h, mesh_o, cam, intr, resolution)?;
    Ok(occlusion_from_render(mesh_h, mesh_o, cam, intr, &masks).0)
}

/// Elementwise mean; entries are exact occurrence counts divided by the map count.
pub fn mean_occlusion_map(maps: &[OcclusionMap]) -> Result<MeanOcclusionMap> {
    let first = maps.first().ok_or(Error::Empty("occlusion maps"))?;
    let (vh, vo) = (first.human.len(), first.object.len());
    let mut ch = vec![0u64; vh];
    let mut co = vec![0u64; vo];
    for m in maps {
        if m.human.len() != vh {
            return Err(Error::DimensionMismatch {
                what: "human occlusion map",
                expected: vh,
                got: m.human.len(),
            });
        }
        if m.object.len() != vo {
            return Err(Error::DimensionMismatch {
                what: "object occlusion map",
                expected: vo,
                got: m.object.len(),
            });
        }
        ch.iter_mut()
            .zip(&m.human)
            .for_each(|(c, &b)| *c += b as u64);
        co.iter_mut()
            .zip(&m.object)
            .for_each(|(c, &b)| *c += b as u64);
    }
    let n = maps.len() as f64;
    Ok(MeanOcclusionMap {
        human: ch.iter().map(|&c| c as f64 / n).collect(),
        object: co.iter().map(|&c| c as f64 / n).collect(),
        count: maps.len(),
    })
}

/// Candidate indices with their weights `c·c̄`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactCandidates {
    pub human: Vec<usize>,
    pub human_weight: Vec<f64>,
    pub object: Vec<usize>,
    pub object_weight: Vec<f64>,
}

impl ContactCandidates {
    pub fn is_empty(&self) -> bool {
        self.human.is_empty() || self.object.is_empty()
    }
}

/// Indices with `c·c̄ > eta` (strict).
pub fn contact_candidates(
    map: &OcclusionMap,
    mean: &MeanOcclusionMap,
    eta: f64,
) -> Result<ContactCandidates> {
    if map.human.len() != mean.human.len() {
        return Err(Error::DimensionMismatch {
            what: "human mean map",
            expected: map.human.len(),
            got: mean.human.len(),
        });
    }
    if map.object.len() != mean.object.len() {
        return Err(Error::DimensionMismatch {
            what: "object mean map",
            expected: map.object.len(),
            got: mean.object.len(),
        });
    }
    let pick = |c: &[u8], m: &[f64]| -> (Vec<usize>, Vec<f64>) {
        c.iter()
            .zip(m)
            .enumerate()
            .filter_map(|(i, (&c, &m))| {
                let w = c as f64 * m;
                (w > eta).then_some((i, w))
            })
            .unzip()
    };
    let (human, human_weight) = pick(&map.human, &mean.human);
    let (object, object_weight) = pick(&map.object, &mean.object);
    Ok(ContactCandidates {
        human,
        human_weight,
        object,
        object_weight,
    })
}

/// Where the pair weight enters the nearest-neighbor search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactWeighting {
    /// `min_j w_ij ‖p_i − p_j‖`
    #[default]
    Inside,
    /// `w_ij* ‖p_i − p_j*‖` with `j*` the unweighted nearest neighbor
    Outside,
}

/// Symmetric weighted chamfer between the candidate point sets, each
/// direction averaged over its own candidates. Zero if either set is empty.
pub fn contact_loss<T: Real>(
    v_h: &[V3<T>],
    v_o: &[V3<T>],
    cand: &ContactCandidates,
    weighting: ContactWeighting,
) -> T {
    if cand.is_empty() {
        return T::cst(0.0);
    }
    let ph: Vec<&V3<T>> = cand.human.iter().map(|&i| &v_h[i]).collect();
    let po: Vec<&V3<T>> = cand.object.iter().map(|&j| &v_o[j]).collect();
    let dist: Vec<Vec<T>> = ph
        .iter()
        .map(|a| {
            po.iter()
                .map(|b| geometry::norm(&geometry::sub(*a, *b)))
                .collect()
        })
        .collect();
    let (nh, no) = (ph.len(), po.len());
    let w = |i: usize, j: usize| cand.human_weight[i] * cand.object_weight[j];
    let score = |i: usize, j: usize| match weighting {
        ContactWeighting::Inside => w(i, j) * dist[i][j].value(),
        ContactWeighting::Outside => dist[i][j].value(),
    };
    let mut forward = T::cst(0.0);
    for i in 0..nh {
        let j = (0..no).fold(0, |best, j| {
            if score(i, j) < score(i, best) {
                j
            } else {
                best
            }
        });
        forward = forward + dist[i][j] * w(i, j);
    }
    let mut backward = T::cst(0.0);
    for j in 0..no {
        let i = (0..nh).fold(0, |best, i| {
            if score(i, j) < score(best, j) {
                i
            } else {
                best
            }
        });
        backward = backward + dist[i][j] * w(i, j);
    }
    forward / nh as f64 + backward / no as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::identity;
    use crate::projection::back_project;
    use rand::{Rng, SeedableRng};

    fn cam0() -> CameraPose {
        CameraPose {
            rotation: identity(),
            translation: [0.0; 3],
        }
    }

    #[test]
    fn mean_is_an_exact_frequency() {
        let maps: Vec<OcclusionMap> = [1u8, 0, 0, 1]
            .iter()
            .map(|&b| OcclusionMap {
                human: vec![b, 1],
                object: vec![0],
            })
            .collect();
        let m = mean_occlusion_map(&maps).unwrap();
        assert_eq!(m.human, vec![0.5, 1.0]);
        assert_eq!(m.object, vec![0.0]);
        assert_eq!(
            mean_occlusion_map(&maps[..1]).unwrap().human,
            vec![1.0, 1.0]
        );
        assert!(mean_occlusion_map(&[]).is_err());
    }

    #[test]
    fn candidate_threshold_is_strict() {
        let map = OcclusionMap {
            human: vec![1, 1, 1, 0],
            object: vec![1],
        };
        let mean = MeanOcclusionMap {
            human: vec![0.2, 0.5, 0.8, 0.9],
            object: vec![0.6],
            count: 5,
        };
        let c = contact_candidates(&map, &mean, 0.5).unwrap();
        assert_eq!(c.human, vec![2]);
        assert_eq!(c.object, vec![0]);
        assert_eq!(c.human_weight, vec![0.8]);
    }

    #[test]
    fn single_pair_contact() {
        let cand = ContactCandidates {
            human: vec![0],
            human_weight: vec![0.5],
            object: vec![0],
            object_weight: vec![1.0],
        };
        let l = contact_loss(
            &[[0.0, 0.0, 0.0]],
            &[[0.0, 2.0, 0.0]],
            &cand,
            ContactWeighting::Inside,
        );
        assert!((l - 2.0).abs() < 1e-15);
        let coincident = contact_loss(
            &[[1.0, 1.0, 1.0]],
            &[[1.0, 1.0, 1.0]],
            &cand,
            ContactWeighting::Inside,
        );
        assert_eq!(coincident, 0.0);
        let empty = ContactCandidates {
            object: vec![],
            object_weight: vec![],
            ..cand
        };
        assert_eq!(
            contact_loss(&[[0.0; 3]], &[[5.0; 3]], &empty, ContactWeighting::Inside),
            0.0
        );
    }

    #[test]
    fn weighting_changes_the_pairing() {
        // near neighbor with tiny weight vs far neighbor with large weight
        let cand = ContactCandidates {
            human: vec![0],
            human_weight: vec![1.0],
            object: vec![0, 1],
            object_weight: vec![0.01, 1.0],
        };
        let vh = [[0.0; 3]];
        let vo = [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let inside = contact_loss(&vh, &vo, &cand, ContactWeighting::Inside);
        let outside = contact_loss(&vh, &vo, &cand, ContactWeighting::Outside);
        // inside: forward picks the 0.01-weighted pair; backward sums both objects
        assert!((inside - (0.01 + (0.01 + 3.0) / 2.0)).abs() < 1e-12);
        assert!((outside - (0.01 + (0.01 + 3.0) / 2.0)).abs() < 1e-12);
        let vo2 = [[3.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let inside2 = contact_loss(&vh, &vo2, &cand, ContactWeighting::Inside);
        let outside2 = contact_loss(&vh, &vo2, &cand, ContactWeighting::Outside);
        assert!((inside2 - (0.03 + (0.03 + 1.0) / 2.0)).abs() < 1e-12);
        assert!((outside2 - (1.0 + (0.03 + 1.0) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn contact_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<V3<f64>> {
            (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect()
        };
        let vh = pts(&mut rng, 6);
        let vo = pts(&mut rng, 5);
        let cand = ContactCandidates {
            human: vec![0, 2, 5],
            human_weight: vec![0.4, 0.9, 0.7],
            object: vec![1, 3, 4],
            object_weight: vec![0.5, 0.8, 1.0],
        };
        let tape = crate::autodiff::Tape::new();
        let flat: Vec<f64> = vh.iter().flatten().copied().collect();
        let xs = tape.vars(&flat);
        let vhv: Vec<V3<_>> = xs.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let vov: Vec<V3<_>> = vo.iter().map(geometry::lift).collect();
        let l = contact_loss(&vhv, &vov, &cand, ContactWeighting::Inside);
        let g = tape.gradient(l).wrt_all(&xs);
        for k in 0..flat.len() {
            let eval = |d: f64| {
                let mut f = flat.clone();
                f[k] += d;
                let v: Vec<V3<f64>> = f.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                contact_loss(&v, &vo, &cand, ContactWeighting::Inside)
            };
            let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((num - g[k]).abs() < 1e-6, "{k}: {num} vs {}", g[k]);
        }
    }

    /// 3×3 vertex grid on a constant-depth quad covering a pixel rectangle.
    fn grid_quad(intr: &Intrinsics, xs: [f64; 3], ys: [f64; 3], depth: f64, offset: usize) -> Mesh {
        let mut vertices = Vec::new();
        for &y in &ys {
            for &x in &xs {
                vertices.push(back_project(intr.from_pixel([x, y]), depth, &cam0(), intr));
            }
        }
        let mut faces = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let a = offset + r * 3 + c;
                faces.push([a, a + 1, a + 4]);
                faces.push([a, a + 4, a + 3]);
            }
        }
        Mesh { vertices, faces }
    }

    fn merge(a: Mesh, b: Mesh) -> Mesh {
        let mut vertices = a.vertices;
        vertices.extend(b.vertices);
        let mut faces = a.faces;
        faces.extend(b.faces);
        Mesh { vertices, faces }
    }

    /// Human: front sheet at 2.0 m and back sheet at 2.3 m over pixels
    /// [40.25, 160.75]². Object: one sheet over x ∈ [100.25, 220.75].
    fn two_quad_scene(object_depth: f64) -> (Mesh, Mesh, Intrinsics) {
        let intr = Intrinsics::new(100.0, 256, 256);
        let hx = [40.25, 100.5, 160.75];
        let ys = [40.25, 100.5, 160.75];
        let human = merge(
            grid_quad(&intr, hx, ys, 2.0, 0),
            grid_quad(&intr, hx, ys, 2.3, 9),
        );
        let object = grid_quad(&intr, [100.25, 160.5, 220.75], ys, object_depth, 0);
        (human, object, intr)
    }

    #[test]
    fn two_quad_truth_table() {
        // columns: human x = 40.25 | 100.5 | 160.75 ; object x = 100.25 | 160.5 | 220.75
        let in_overlap_h = |v: usize| v % 3 != 0;
        let in_overlap_o = |v: usize| v % 3 != 2;

        let (h, o, intr) = two_quad_scene(1.5);
        let masks = render_masks(&h, &o, &cam0(), &intr, 256).unwrap();
        let (map, sh, so) = occlusion_from_render(&h, &o, &cam0(), &intr, &masks);
        let expect_h: Vec<u8> = (0..18).map(|v| (v < 9 && in_overlap_h(v)) as u8).collect();
        assert_eq!(map.human, expect_h);
        assert_eq!(map.object, vec![0; 9]);
        assert!(sh[..9].iter().all(|s| *s == Surface::Front));
        assert!(sh[9..].iter().all(|s| *s == Surface::Back));
        assert!(so.iter().all(|s| *s == Surface::Front));

        let (h, o, intr) = two_quad_scene(2.6);
        let map = occlusion_map(&h, &o, &cam0(), &intr, 256).unwrap();
        let expect_h: Vec<u8> = (0..18)
            .map(|v| (v >= 9 && in_overlap_h(v - 9)) as u8)
            .collect();
        let expect_o: Vec<u8> = (0..9).map(|v| in_overlap_o(v) as u8).collect();
        assert_eq!(map.human, expect_h);
        assert_eq!(map.object, expect_o);
    }

    #[test]
    fn separated_scene_has_no_occlusion() {
        let intr = Intrinsics::new(100.0, 256, 256);
        let h = grid_quad(&intr, [10.25, 30.5, 50.75], [10.25, 30.5, 50.75], 2.0, 0);
        let o = grid_quad(
            &intr,
            [150.25, 170.5, 190.75],
            [150.25, 170.5, 190.75],
            1.0,
            0,
        );
        let map = occlusion_map(&h, &o, &cam0(), &intr, 256).unwrap();
        assert!(map.human.iter().chain(&map.object).all(|&b| b == 0));
    }
}
