//! Z-buffered silhouette rasterization of the human and object meshes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::V3;
use crate::kinematics::Mesh;
use crate::projection::{CameraPose, Intrinsics, EPS_DEPTH};

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Self {
        MaskGrid {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Run lengths in row-major order, starting with a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Rle {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0u32;
        for &b in &self.data {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        runs.push(len);
        Rle {
            width: self.width,
            height: self.height,
            runs,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let mut data = Vec::with_capacity(rle.width * rle.height);
        let mut cur = false;
        for &r in &rle.runs {
            data.extend(std::iter::repeat_n(cur, r as usize));
            cur = !cur;
        }
        if data.len() != rle.width * rle.height {
            return Err(Error::Format(format!(
                "mask runs cover {} cells, expected {}",
                data.len(),
                rle.width * rle.height
            )));
        }
        Ok(MaskGrid {
            width: rle.width,
            height: rle.height,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl Serialize for MaskGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rle().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rle = Rle::deserialize(d)?;
        MaskGrid::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

/// Mapping between centered image coordinates and a `resolution²` grid
/// covering the whole image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderGrid {
    pub intrinsics: Intrinsics,
    pub resolution: usize,
}

impl RenderGrid {
    fn scale(&self) -> (f64, f64) {
        (
            self.resolution as f64 / self.intrinsics.width as f64,
            self.resolution as f64 / self.intrinsics.height as f64,
        )
    }

    /// Continuous grid coordinates of a camera-frame point.
    pub fn grid_position(&self, c: &V3<f64>) -> [f64; 2] {
        let f = self.intrinsics.focal;
        let px = self.intrinsics.to_pixel([f * c[0] / c[2], f * c[1] / c[2]]);
        let (sx, sy) = self.scale();
        [px[0] * sx, px[1] * sy]
    }

    /// Grid cell containing a camera-frame point, if in front and inside.
    pub fn cell(&self, c: &V3<f64>) -> Option<usize> {
        if !(c[2] > EPS_DEPTH) {
            return None;
        }
        let [gx, gy] = self.grid_position(c);
        let r = self.resolution as f64;
        if !(gx >= 0.0 && gy >= 0.0 && gx < r && gy < r) {
            return None;
        }
        Some(gy as usize * self.resolution + gx as usize)
    }
}

/// Silhouette and camera-depth buffer of one mesh; empty cells hold +∞.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub silhouette: MaskGrid,
    pub depth: Vec<f64>,
    pub triangles_drawn: usize,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterizes `mesh` with perspective-correct depth; triangles with any
/// vertex at or behind the camera plane are skipped.
pub fn rasterize(mesh: &Mesh, cam: &CameraPose, grid: &RenderGrid) -> Raster {
    let res = grid.resolution;
    let mut silhouette = MaskGrid::new(res, res);
    let mut depth = vec![f64::INFINITY; res * res];
    let cams: Vec<V3<f64>> = mesh.vertices.iter().map(|v| cam.to_camera(v)).collect();
    let mut drawn = 0;
    for f in &mesh.faces {
        let c = [cams[f[0]], cams[f[1]], cams[f[2]]];
        if c.iter().any(|p| !(p[2] > EPS_DEPTH)) {
            continue;
        }
        let p = [
            grid.grid_position(&c[0]),
            grid.grid_position(&c[1]),
            grid.grid_position(&c[2]),
        ];
        let area = edge(p[0], p[1], p[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        drawn += 1;
        let sign = area.signum();
        let lo = |k: usize| p.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| p.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (lo(0) - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo(1) - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi(0) - 0.5).floor() + 1.0).clamp(0.0, res as f64) as usize;
        let y1 = ((hi(1) - 0.5).floor() + 1.0).clamp(0.0, res as f64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let w = [
                    sign * edge(p[1], p[2], q),
                    sign * edge(p[2], p[0], q),
                    sign * edge(p[0], p[1], q),
                ];
                if w.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let total = w[0] + w[1] + w[2];
                let inv_z = (w[0] / c[0][2] + w[1] / c[1][2] + w[2] / c[2][2]) / total;
                let z = 1.0 / inv_z;
                let i = y * res + x;
                silhouette.data[i] = true;
                if z < depth[i] {
                    depth[i] = z;
                }
            }
        }
    }
    Raster {
        silhouette,
        depth,
        triangles_drawn: drawn,
    }
}

/// Both silhouettes, the depth-resolved visible masks and their overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMasks {
    /// Cells where the person is the front-most surface.
    pub person_mask: MaskGrid,
    /// Cells where the object is the front-most surface.
    pub object_mask: MaskGrid,
    /// Cells covered by both silhouettes.
    pub occlusion_region: MaskGrid,
    pub human: Raster,
    pub object: Raster,
}

pub fn render_masks(
    mesh_h: &Mesh,
    mesh_o: &Mesh,
    cam: &CameraPose,
    intr: &Intrinsics,
    resolution: usize,
) -> Result<RenderedMasks> {
    let grid = RenderGrid {
        intrinsics: *intr,
        resolution,
    };
    let human = rasterize(mesh_h, cam, &grid);
    let object = rasterize(mesh_o, cam, &grid);
    if human.triangles_drawn + object.triangles_drawn == 0 {
        return Err(Error::EmptyProjection);
    }
    let n = resolution * resolution;
    let mut person_mask = MaskGrid::new(resolution, resolution);
    let mut object_mask = MaskGrid::new(resolution, resolution);
    let mut occlusion_region = MaskGrid::new(resolution, resolution);
    for i in 0..n {
        let (h, o) = (human.silhouette.data[i], object.silhouette.data[i]);
        occlusion_region.data[i] = h && o;
        person_mask.data[i] = h && (!o || human.depth[i] <= object.depth[i]);
        object_mask.data[i] = o && (!h || object.depth[i] < human.depth[i]);
    }
    Ok(RenderedMasks {
        person_mask,
        object_mask,
        occlusion_region,
        human,
        object,
    })
}
