//! Body and object parameters to 3D keypoints and meshes in the body-local frame.
//!
//! Points are rows and rotations act as `x · Rᵀ`, so an object keypoint is
//! `s · x̂ · Rᵀ + t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{self, M3, V3};

/// Triangle mesh, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<V3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for f in &self.faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Format(format!(
                    "face {f:?} out of range ({n} vertices)"
                )));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * geometry::norm(&geometry::cross(
            &geometry::sub(&b, &a),
            &geometry::sub(&c, &a),
        ))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// Same topology with replaced vertex positions.
    pub fn with_vertices(&self, vertices: Vec<V3<f64>>) -> Mesh {
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }
}

/// Shape and pose coefficients of the body model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl BodyParams {
    pub fn zeros(model: &impl BodyModel) -> Self {
        BodyParams {
            beta: vec![0.0; model.shape_dim()],
            theta: vec![0.0; model.pose_dim()],
        }
    }
}

/// Rigid transform applied at the root joint, `x ↦ Q x + v`.
#[derive(Debug, Clone, Copy)]
pub struct RootTransform<T> {
    pub rotation: M3<T>,
    pub translation: V3<T>,
}

impl<T: Real> RootTransform<T> {
    pub fn identity() -> Self {
        RootTransform {
            rotation: geometry::identity(),
            translation: [T::cst(0.0); 3],
        }
    }
}

/// Anything that maps shape/pose coefficients to joints and a surface.
///
/// The root joint sits at the origin of the body-local frame for zero
/// parameters; `theta` holds one axis-angle triple per non-root joint.
pub trait BodyModel {
    fn joint_count(&self) -> usize;
    fn shape_dim(&self) -> usize;
    fn faces(&self) -> &[[usize; 3]];

    fn pose_dim(&self) -> usize {
        3 * (self.joint_count() - 1)
    }

    /// Joint positions and surface vertices.
    fn forward<T: Real>(
        &self,
        beta: &[T],
        theta: &[T],
        root: &RootTransform<T>,
    ) -> Result<(Vec<V3<T>>, Vec<V3<T>>)>;

    fn evaluate(&self, params: &BodyParams) -> Result<(Vec<V3<f64>>, Mesh)> {
        let (joints, verts) =
            self.forward(&params.beta, &params.theta, &RootTransform::identity())?;
        Ok((
            joints,
            Mesh {
                vertices: verts,
                faces: self.faces().to_vec(),
            },
        ))
    }
}

/// Kinematic tree with linear bone-offset shape basis and a tube surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickBodyModel {
    pub names: Vec<String>,
    /// Parent-relative joint offsets at zero shape, meters.
    pub rest_offsets: Vec<V3<f64>>,
    /// Parent index per joint; `None` only for joint 0.
    pub parent: Vec<Option<usize>>,
    /// `shape_basis[j][k]` is the offset displacement of joint `j` per unit of `beta[k]`.
    pub shape_basis: Vec<Vec<V3<f64>>>,
    pub tube_radius: f64,
    pub tube_segments: usize,
    #[serde(skip)]
    surface: TubeSurface,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct TubeSurface {
    /// (owning joint, child joint or none, local ring offset, fraction along bone)
    anchors: Vec<(usize, Option<usize>, V3<f64>, f64)>,
    faces: Vec<[usize; 3]>,
}

const SHAPE_DIM: usize = 10;

impl StickBodyModel {
    pub fn new(
        names: Vec<String>,
        rest_offsets: Vec<V3<f64>>,
        parent: Vec<Option<usize>>,
        shape_basis: Vec<Vec<V3<f64>>>,
        tube_radius: f64,
        tube_segments: usize,
    ) -> Result<Self> {
        let mut m = StickBodyModel {
            names,
            rest_offsets,
            parent,
            shape_basis,
            tube_radius,
            tube_segments,
            surface: TubeSurface::default(),
        };
        m.finish()?;
        Ok(m)
    }

    fn finish(&mut self) -> Result<()> {
        let n = self.rest_offsets.len();
        if n == 0 || self.parent.len() != n || self.shape_basis.len() != n || self.names.len() != n
        {
            return Err(Error::Format("joint arrays disagree in length".into()));
        }
        if self.parent[0].is_some() {
            return Err(Error::Format("joint 0 must be the root".into()));
        }
        for (j, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::Format(format!(
                        "joint {j} needs a parent with lower index"
                    )))
                }
            }
        }
        let dim = self.shape_basis[0].len();
        if self.shape_basis.iter().any(|b| b.len() != dim) {
            return Err(Error::Format("ragged shape basis".into()));
        }
        if self.tube_segments < 3 || self.tube_radius <= 0.0 {
            return Err(Error::Format(
                "tube needs ≥3 segments and positive radius".into(),
            ));
        }
        self.surface = self.build_surface();
        Ok(())
    }

    /// 22-joint skeleton laid out like the SMPL body joints (y up, z forward).
    pub fn standard() -> Self {
        let table: [(&str, Option<usize>, V3<f64>); 22] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("left_hip", Some(0), [0.06, -0.09, 0.0]),
            ("right_hip", Some(0), [-0.06, -0.09, 0.0]),
            ("spine1", Some(0), [0.0, 0.11, -0.01]),
            ("left_knee", Some(1), [0.04, -0.38, 0.0]),
            ("right_knee", Some(2), [-0.04, -0.38, 0.0]),
            ("spine2", Some(3), [0.0, 0.13, 0.0]),
            ("left_ankle", Some(4), [0.0, -0.40, -0.04]),
            ("right_ankle", Some(5), [0.0, -0.40, -0.04]),
            ("spine3", Some(6), [0.0, 0.05, 0.02]),
            ("left_foot", Some(7), [0.02, -0.05, 0.12]),
            ("right_foot", Some(8), [-0.02, -0.05, 0.12]),
            ("neck", Some(9), [0.0, 0.21, -0.03]),
            ("left_collar", Some(9), [0.07, 0.11, -0.01]),
            ("right_collar", Some(9), [-0.07, 0.11, -0.01]),
            ("head", Some(12), [0.0, 0.09, 0.05]),
            ("left_shoulder", Some(13), [0.11, 0.04, -0.02]),
            ("right_shoulder", Some(14), [-0.11, 0.04, -0.02]),
            ("left_elbow", Some(16), [0.26, 0.0, -0.01]),
            ("right_elbow", Some(17), [-0.26, 0.0, -0.01]),
            ("left_wrist", Some(18), [0.25, 0.0, 0.0]),
            ("right_wrist", Some(19), [-0.25, 0.0, 0.0]),
        ];
        let names = table.iter().map(|t| t.0.to_string()).collect();
        let parent: Vec<_> = table.iter().map(|t| t.1).collect();
        let rest: Vec<_> = table.iter().map(|t| t.2).collect();
        let basis = standard_shape_basis(&rest);
        StickBodyModel::new(names, rest, parent, basis, 0.05, 6)
            .expect("built-in skeleton is valid")
    }

    /// Two-link chain used in tests: root, elbow and tip.
    pub fn chain(offsets: &[V3<f64>]) -> Self {
        let n = offsets.len();
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parent = (0..n).map(|i| i.checked_sub(1)).collect();
        let basis = vec![vec![[0.0; 3]; SHAPE_DIM]; n];
        StickBodyModel::new(names, offsets.to_vec(), parent, basis, 0.05, 4).expect("valid chain")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: StickBodyModel = serde_json::from_str(text)?;
        m.finish()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn children(&self, j: usize) -> Vec<usize> {
        (0..self.parent.len())
            .filter(|&c| self.parent[c] == Some(j))
            .collect()
    }

    fn build_surface(&self) -> TubeSurface {
        let seg = self.tube_segments;
        let mut anchors = Vec::new();
        let mut faces = Vec::new();
        for j in 0..self.parent.len() {
            for c in self.children(j) {
                let dir = geometry::normalize(&self.rest_offsets[c]);
                let helper = if dir[0].abs() < 0.9 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 1.0, 0.0]
                };
                let e1 = geometry::normalize(&geometry::cross(&dir, &helper));
                let e2 = geometry::cross(&dir, &e1);
                let base = anchors.len();
                for end in 0..2 {
                    for k in 0..seg {
                        let a = std::f64::consts::TAU * k as f64 / seg as f64;
                        let ring = geometry::add(
                            &geometry::scale(&e1, self.tube_radius * a.cos()),
                            &geometry::scale(&e2, self.tube_radius * a.sin()),
                        );
                        anchors.push((j, Some(c), ring, end as f64));
                    }
                }
                // end caps
                anchors.push((j, Some(c), [0.0; 3], 0.0));
                anchors.push((j, Some(c), [0.0; 3], 1.0));
                let cap0 = base + 2 * seg;
                let cap1 = cap0 + 1;
                for k in 0..seg {
                    let k1 = (k + 1) % seg;
                    let (a0, a1, b0, b1) = (base + k, base + k1, base + seg + k, base + seg + k1);
                    faces.push([a0, a1, b1]);
                    faces.push([a0, b1, b0]);
                    faces.push([cap0, a1, a0]);
                    faces.push([cap1, b0, b1]);
                }
            }
        }
        TubeSurface { anchors, faces }
    }

    /// Shape-adjusted parent-relative offsets.
    fn offsets<T: Real>(&self, beta: &[T]) -> Vec<V3<T>> {
        self.rest_offsets
            .iter()
            .zip(&self.shape_basis)
            .map(|(rest, basis)| {
                let mut o = geometry::lift::<T>(rest);
                for (b, dir) in beta.iter().zip(basis) {
                    for a in 0..3 {
                        if dir[a] != 0.0 {
                            o[a] = o[a] + *b * dir[a];
                        }
                    }
                }
                o
            })
            .collect()
    }
}

fn standard_shape_basis(rest: &[V3<f64>]) -> Vec<Vec<V3<f64>>> {
    // Each component stretches a body region along its rest direction, in
    // meters per unit coefficient (roughly ±3 units span adult variation).
    let legs = [1, 2, 4, 5, 7, 8];
    let shins = [7, 8];
    let arms = [18, 19, 20, 21];
    let forearms = [20, 21];
    let spine = [3, 6, 9];
    let neck_head = [12, 15];
    let shoulders = [13, 14, 16, 17];
    let hips = [1, 2];
    let feet = [10, 11];
    let n = rest.len();
    let mut basis = vec![vec![[0.0; 3]; SHAPE_DIM]; n];
    let stretch = |basis: &mut Vec<Vec<V3<f64>>>, comp: usize, joints: &[usize], amount: f64| {
        for &j in joints {
            if j < n {
                let len = geometry::norm(&rest[j]);
                if len > 0.0 {
                    basis[j][comp] = geometry::scale(&rest[j], amount / len);
                }
            }
        }
    };
    let all: Vec<usize> = (1..n).collect();
    stretch(&mut basis, 0, &all, 0.008);
    stretch(&mut basis, 1, &legs, 0.01);
    stretch(&mut basis, 2, &arms, 0.01);
    stretch(&mut basis, 3, &spine, 0.008);
    stretch(&mut basis, 4, &shoulders, 0.006);
    stretch(&mut basis, 5, &hips, 0.006);
    stretch(&mut basis, 6, &neck_head, 0.006);
    stretch(&mut basis, 7, &feet, 0.006);
    stretch(&mut basis, 8, &shins, 0.008);
    stretch(&mut basis, 9, &forearms, 0.008);
    basis
}

impl BodyModel for StickBodyModel {
    fn joint_count(&self) -> usize {
        self.parent.len()
    }

    fn shape_dim(&self) -> usize {
        self.shape_basis[0].len()
    }

    fn faces(&self) -> &[[usize; 3]] {
        &self.surface.faces
    }

    fn forward<T: Real>(
        &self,
        beta: &[T],
        theta: &[T],
        root: &RootTransform<T>,
    ) -> Result<(Vec<V3<T>>, Vec<V3<T>>)> {
        if beta.len() != self.shape_dim() {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: self.shape_dim(),
                got: beta.len(),
            });
        }
        if theta.len() != self.pose_dim() {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: self.pose_dim(),
                got: theta.len(),
            });
        }
        let offsets = self.offsets(beta);
        let n = self.joint_count();
        let mut rot: Vec<M3<T>> = Vec::with_capacity(n);
        let mut pos: Vec<V3<T>> = Vec::with_capacity(n);
        rot.push(root.rotation);
        pos.push(geometry::add(
            &root.translation,
            &geometry::mat_vec(&root.rotation, &offsets[0]),
        ));
        for j in 1..n {
            let p = self.parent[j].expect("validated tree");
            let local = geometry::exp_map(&[
                theta[3 * (j - 1)],
                theta[3 * (j - 1) + 1],
                theta[3 * (j - 1) + 2],
            ]);
            pos.push(geometry::add(
                &pos[p],
                &geometry::mat_vec(&rot[p], &offsets[j]),
            ));
            rot.push(geometry::mat_mul(&rot[p], &local));
        }
        let verts = self
            .surface
            .anchors
            .iter()
            .map(|&(j, child, ring, frac)| {
                let mut local = geometry::lift::<T>(&ring);
                if let Some(c) = child {
                    local = geometry::add(&local, &geometry::scale(&offsets[c], T::cst(frac)));
                }
                geometry::add(&pos[j], &geometry::mat_vec(&rot[j], &local))
            })
            .collect();
        Ok((pos, verts))
    }
}

/// Rigid object with keypoints, part sets and contact regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub name: String,
    pub mesh: Mesh,
    /// Keypoints in the object frame; stored as mesh vertex indices.
    pub keypoint_indices: Vec<usize>,
    /// Vertex-index sets used by part-labelled annotation.
    pub parts: Vec<Vec<usize>>,
    /// Vertex-index sets that may touch the body.
    pub contact_regions: Vec<Vec<usize>>,
    pub default_scale: f64,
}

impl ObjectTemplate {
    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        let n = self.mesh.vertices.len();
        let in_range = |set: &[usize]| !set.is_empty() && set.iter().all(|&i| i < n);
        if !self.keypoint_indices.iter().all(|&i| i < n) {
            return Err(Error::Format("keypoint index out of range".into()));
        }
        if !self.parts.iter().all(|p| in_range(p)) {
            return Err(Error::Format(
                "part sets must be nonempty and in range".into(),
            ));
        }
        if !self.contact_regions.iter().all(|p| in_range(p)) {
            return Err(Error::Format(
                "contact regions must be nonempty and in range".into(),
            ));
        }
        if !(self.default_scale > 0.0) {
            return Err(Error::Format("default scale must be positive".into()));
        }
        Ok(())
    }

    pub fn keypoints_local(&self) -> Vec<V3<f64>> {
        self.keypoint_indices
            .iter()
            .map(|&i| self.mesh.vertices[i])
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: ObjectTemplate = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Box of the given half-extents with `subdiv` cells per face edge.
    ///
    /// Keypoints are the 8 corners. Parts are six edges (three vertices each:
    /// both ends and the midpoint); contact regions are the two faces normal
    /// to the long x axis and the two faces normal to y.
    pub fn cuboid(name: &str, half: V3<f64>, subdiv: usize) -> Self {
        assert!(
            subdiv >= 2 && subdiv % 2 == 0,
            "even subdivision keeps edge midpoints on the grid"
        );
        let mut vertices: Vec<V3<f64>> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut faces = Vec::new();
        let mut face_vertices: Vec<Vec<usize>> = Vec::new();
        let key = |p: &V3<f64>| -> [i64; 3] {
            [
                (p[0] * 1e6).round() as i64,
                (p[1] * 1e6).round() as i64,
                (p[2] * 1e6).round() as i64,
            ]
        };
        // axis normal, sign
        for axis in 0..3 {
            for &sign in &[-1.0, 1.0] {
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut grid = vec![vec![0usize; subdiv + 1]; subdiv + 1];
                let mut members = Vec::new();
                for (i, row) in grid.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        let mut p = [0.0; 3];
                        p[axis] = sign * half[axis];
                        p[a1] = half[a1] * (2.0 * i as f64 / subdiv as f64 - 1.0);
                        p[a2] = half[a2] * (2.0 * j as f64 / subdiv as f64 - 1.0);
                        let id = *index.entry(key(&p)).or_insert_with(|| {
                            vertices.push(p);
                            vertices.len() - 1
                        });
                        *cell = id;
                        members.push(id);
                    }
                }
                for i in 0..subdiv {
                    for j in 0..subdiv {
                        let (a, b, c, d) = (
                            grid[i][j],
                            grid[i + 1][j],
                            grid[i + 1][j + 1],
                            grid[i][j + 1],
                        );
                        // outward winding
                        if sign > 0.0 {
                            faces.push([a, b, c]);
                            faces.push([a, c, d]);
                        } else {
                            faces.push([a, c, b]);
                            faces.push([a, d, c]);
                        }
                    }
                }
                face_vertices.push(members);
            }
        }
        let find = |p: V3<f64>| -> usize { index[&key(&p)] };
        let corner = |sx: f64, sy: f64, sz: f64| [sx * half[0], sy * half[1], sz * half[2]];
        let mut keypoint_indices = Vec::new();
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    keypoint_indices.push(find(corner(sx, sy, sz)));
                }
            }
        }
        let edge = |a: V3<f64>, b: V3<f64>| -> Vec<usize> {
            let mid = geometry::scale(&geometry::add(&a, &b), 0.5);
            vec![find(a), find(mid), find(b)]
        };
        let parts = vec![
            edge(corner(-1.0, -1.0, -1.0), corner(1.0, -1.0, -1.0)),
            edge(corner(-1.0, 1.0, -1.0), corner(1.0, 1.0, -1.0)),
            edge(corner(-1.0, -1.0, 1.0), corner(1.0, -1.0, 1.0)),
            edge(corner(-1.0, 1.0, 1.0), corner(1.0, 1.0, 1.0)),
            edge(corner(1.0, -1.0, -1.0), corner(1.0, 1.0, -1.0)),
            edge(corner(-1.0, -1.0, 1.0), corner(-1.0, -1.0, -1.0)),
        ];
        let dedup = |mut v: Vec<usize>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let contact_regions = vec![
            dedup(face_vertices[0].clone()),
            dedup(face_vertices[1].clone()),
            dedup(face_vertices[2].clone()),
            dedup(face_vertices[3].clone()),
        ];
        ObjectTemplate {
            name: name.to_string(),
            mesh: Mesh { vertices, faces },
            keypoint_indices,
            parts,
            contact_regions,
            default_scale: 1.0,
        }
    }

    /// Built-in elongated box used by the synthetic suite.
    pub fn standard() -> Self {
        Self::cuboid("box", [0.30, 0.12, 0.08], 4)
    }
}

/// Rigid pose and scale of the object in the body-local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub rotation: M3<f64>,
    pub translation: V3<f64>,
    pub scale: f64,
}

impl ObjectPose {
    pub fn identity() -> Self {
        ObjectPose {
            rotation: geometry::identity(),
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dev, det) = geometry::orthonormality(&self.rotation);
        if dev >= 1e-9 || (det - 1.0).abs() >= 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "rotation not orthonormal (dev {dev:e}, det {det})"
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig("object scale must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the refinement optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub body: BodyParams,
    pub object: ObjectPose,
}

/// Human keypoints followed by object keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet<T = f64> {
    pub points: Vec<V3<T>>,
    pub n_human: usize,
    pub n_object: usize,
}

impl<T: Copy> KeypointSet<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn split(&self) -> (&[V3<T>], &[V3<T>]) {
        self.points.split_at(self.n_human)
    }
}

/// Joint positions of `params` in the body-local frame.
pub fn body_keypoints<M: BodyModel>(model: &M, params: &BodyParams) -> Result<Vec<V3<f64>>> {
    Ok(model
        .forward(&params.beta, &params.theta, &RootTransform::identity())?
        .0)
}

/// `s · x̂ · Rᵀ + t` for every template point.
pub fn transform_points<T: Real>(
    local: &[V3<f64>],
    rotation: &M3<T>,
    translation: &V3<T>,
    scale: T,
) -> Vec<V3<T>> {
    local
        .iter()
        .map(|p| {
            let r = geometry::mat_vec(rotation, &geometry::lift::<T>(p));
            geometry::add(&geometry::scale(&r, scale), translation)
        })
        .collect()
}

pub fn object_keypoints(template: &ObjectTemplate, pose: &ObjectPose) -> Vec<V3<f64>> {
    transform_points(
        &template.keypoints_local(),
        &pose.rotation,
        &pose.translation,
        pose.scale,
    )
}

pub fn object_mesh(template: &ObjectTemplate, pose: &ObjectPose) -> Mesh {
    template.mesh.with_vertices(transform_points(
        &template.mesh.vertices,
        &pose.rotation,
        &pose.translation,
        pose.scale,
    ))
}

pub fn assemble_keypoints<T: Copy>(human: &[V3<T>], object: &[V3<T>]) -> KeypointSet<T> {
    let mut points = Vec::with_capacity(human.len() + object.len());
    points.extend_from_slice(human);
    points.extend_from_slice(object);
    KeypointSet {
        points,
        n_human: human.len(),
        n_object: object.len(),
    }
}

/// Keypoints and meshes of a full scene.
pub fn scene_geometry<M: BodyModel>(
    model: &M,
    template: &ObjectTemplate,
    scene: &SceneParams,
) -> Result<(KeypointSet, Mesh, Mesh)> {
    let (joints, body_mesh) = model.evaluate(&scene.body)?;
    let kps = assemble_keypoints(&joints, &object_keypoints(template, &scene.object));
    Ok((kps, body_mesh, object_mesh(template, &scene.object)))
}
