//! Ray-geometry distance between views and approximate top-k grouping.
//!
//! Two views of the same interaction produce ray bundles whose corresponding
//! rays intersect, so their mean skew-line distance is near zero. The
//! grouping is a neighbor-of-neighbor refinement: random initial neighbor
//! sets, then for every item the union of its forward and reverse neighbors
//! proposes swaps into each other's sets.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, V3};
use crate::projection::{CameraPose, Intrinsics, Keypoints2D, Rep25D};

/// Below this cross-product norm two rays count as parallel.
const PARALLEL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub image_id: String,
    pub rep: Rep25D,
    pub keypoints: Keypoints2D,
    pub camera: CameraPose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub items: Vec<DatasetItem>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let n = self.items.first().map(|it| it.rep.n()).unwrap_or(0);
        for it in &self.items {
            if !ids.insert(it.image_id.as_str()) {
                return Err(Error::Format(format!("duplicate image id {}", it.image_id)));
            }
            if it.rep.n() != n {
                return Err(Error::DimensionMismatch {
                    what: "ray count",
                    expected: n,
                    got: it.rep.n(),
                });
            }
        }
        Ok(())
    }
}

/// How a candidate is judged against the current neighbor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapCriterion {
    /// Candidate replaces the farthest member when it is closer to the anchor item.
    #[default]
    Anchored,
    /// Candidate replaces the member with the largest mean intra-set distance
    /// when its own mean distance to the set is smaller. The anchor item never
    /// enters the comparison.
    Compactness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    pub k: usize,
    pub n_iter: usize,
    /// Largest flattened-representation distance a candidate may have to any member.
    pub sim_threshold: f64,
    pub drop_distance: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub criterion: SwapCriterion,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            k: 8,
            n_iter: 10,
            sim_threshold: 20.0,
            drop_distance: 0.5,
            rng_seed: 0,
            criterion: SwapCriterion::Anchored,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n_iter < 1 {
            return Err(Error::InvalidConfig(
                "k and n_iter must be at least 1".into(),
            ));
        }
        if !(self.sim_threshold > 0.0 && self.drop_distance > 0.0) {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Forward neighbor lists and the matching reverse sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSets {
    pub neighbors: Vec<Vec<usize>>,
    pub reverse: Vec<BTreeSet<usize>>,
}

impl NeighborSets {
    fn from_forward(neighbors: Vec<Vec<usize>>) -> Self {
        let mut reverse = vec![BTreeSet::new(); neighbors.len()];
        for (p, ns) in neighbors.iter().enumerate() {
            for &i in ns {
                reverse[i].insert(p);
            }
        }
        NeighborSets { neighbors, reverse }
    }

    /// `p ∈ reverse[q] ⟺ q ∈ neighbors[p]`, no self loops, no duplicates.
    pub fn is_consistent(&self) -> bool {
        let rebuilt = NeighborSets::from_forward(self.neighbors.clone());
        rebuilt.reverse == self.reverse
            && self.neighbors.iter().enumerate().all(|(p, ns)| {
                let set: BTreeSet<_> = ns.iter().collect();
                set.len() == ns.len() && !set.contains(&p)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub index: usize,
    pub keypoints: Keypoints2D,
    pub camera: CameraPose,
    pub intrinsics: Intrinsics,
    pub distance: f64,
}

/// Retained neighbors of one item, ascending by distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub anchor: usize,
    pub entries: Vec<ClusterEntry>,
}

impl Cluster {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Distance between the line through `t` along `d` and the line through `t2` along `d2`.
pub fn ray_pair_distance(d: &V3<f64>, t: &V3<f64>, d2: &V3<f64>, t2: &V3<f64>) -> f64 {
    let w = geometry::sub(t, t2);
    let c = geometry::cross(d, d2);
    let cn = geometry::norm(&c);
    if cn < PARALLEL_EPS {
        let along = geometry::dot(&w, d);
        return geometry::norm(&geometry::sub(&w, &geometry::scale(d, along)));
    }
    (geometry::dot(&c, &w) / cn).abs()
}

/// Mean ray distance over corresponding keypoints.
pub fn rep_distance(a: &Rep25D, b: &Rep25D) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch {
            what: "ray count",
            expected: a.n(),
            got: b.n(),
        });
    }
    if a.n() == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .directions
        .iter()
        .zip(&b.directions)
        .map(|(d, d2)| ray_pair_distance(d, &a.cam_translation, d2, &b.cam_translation))
        .sum();
    Ok(sum / a.n() as f64)
}

/// Euclidean norm of the difference of the flattened representations.
pub fn flat_distance(a: &Rep25D, b: &Rep25D) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_size(ds: &DatasetIndex, k: usize) -> Result<()> {
    if ds.len() <= k {
        return Err(Error::DatasetTooSmall { items: ds.len(), k });
    }
    ds.validate()
}

/// All distances from item `p`, as `(distance, index)` sorted ascending.
fn ranked_from(ds: &DatasetIndex, p: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = (0..ds.len())
        .filter(|&i| i != p)
        .map(|i| {
            (
                rep_distance(&ds.items[p].rep, &ds.items[i].rep).expect("validated"),
                i,
            )
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

/// Exact k nearest neighbors by exhaustive comparison; ties go to the lower index.
pub fn brute_force_topk(ds: &DatasetIndex, k: usize) -> Result<NeighborSets> {
    check_size(ds, k)?;
    let neighbors = (0..ds.len())
        .map(|p| {
            ranked_from(ds, p)
                .into_iter()
                .take(k)
                .map(|(_, i)| i)
                .collect()
        })
        .collect();
    Ok(NeighborSets::from_forward(neighbors))
}

/// Memoized symmetric distances.
struct DistanceCache<'a> {
    ds: &'a DatasetIndex,
    rep: HashMap<(usize, usize), f64>,
}

impl<'a> DistanceCache<'a> {
    fn new(ds: &'a DatasetIndex) -> Self {
        DistanceCache {
            ds,
            rep: HashMap::new(),
        }
    }

    fn get(&mut self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let key = (a.min(b), a.max(b));
        let ds = self.ds;
        *self.rep.entry(key).or_insert_with(|| {
            rep_distance(&ds.items[key.0].rep, &ds.items[key.1].rep).expect("validated")
        })
    }
}

/// Approximate top-k neighbor sets; bit-reproducible for a fixed seed.
pub fn knn_group(ds: &DatasetIndex, cfg: &GroupingConfig) -> Result<NeighborSets> {
    knn_group_traced(ds, cfg, |_, _| {})
}

/// As [`knn_group`], calling `on_iteration(iter, sets)` after every sweep.
pub fn knn_group_traced(
    ds: &DatasetIndex,
    cfg: &GroupingConfig,
    mut on_iteration: impl FnMut(usize, &NeighborSets),
) -> Result<NeighborSets> {
    cfg.validate()?;
    check_size(ds, cfg.k)?;
    let m = ds.len();
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut neighbors: Vec<Vec<usize>> = (0..m)
        .map(|p| {
            sample(&mut rng, m - 1, k)
                .into_iter()
                .map(|i| if i >= p { i + 1 } else { i })
                .collect()
        })
        .collect();
    for ns in &mut neighbors {
        ns.sort_unstable();
    }
    let mut sets = NeighborSets::from_forward(neighbors);
    let flats: Vec<Vec<f64>> = ds.items.iter().map(|it| it.rep.flatten()).collect();
    let flat_dist = |a: usize, b: usize| -> f64 {
        flats[a]
            .iter()
            .zip(&flats[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut cache = DistanceCache::new(ds);

    for iter in 0..cfg.n_iter {
        for t in 0..m {
            let mut candidates: Vec<usize> = sets.neighbors[t].clone();
            candidates.extend(sets.reverse[t].iter().copied());
            candidates.sort_unstable();
            candidates.dedup();
            for &p in &candidates {
                for &q in &candidates {
                    if p == q || sets.neighbors[p].contains(&q) {
                        continue;
                    }
                    let members = &sets.neighbors[p];
                    let (i_max, d_max, d_q) = match cfg.criterion {
                        SwapCriterion::Anchored => {
                            let (i_max, d_max) =
                                argmax(members.iter().map(|&i| (i, cache.get(p, i))));
                            (i_max, d_max, cache.get(p, q))
                        }
                        SwapCriterion::Compactness => {
                            let mean_to_set = |cache: &mut DistanceCache, x: usize| -> f64 {
                                members.iter().map(|&j| cache.get(x, j)).sum::<f64>() / k as f64
                            };
                            let scores: Vec<(usize, f64)> = members
                                .iter()
                                .map(|&i| (i, mean_to_set(&mut cache, i)))
                                .collect();
                            let (i_max, d_max) = argmax(scores.into_iter());
                            (i_max, d_max, mean_to_set(&mut cache, q))
                        }
                    };
                    let s_max = members.iter().map(|&i| flat_dist(i, q)).fold(0.0, f64::max);
                    if d_q < d_max && s_max < cfg.sim_threshold {
                        let ns = &mut sets.neighbors[p];
                        let pos = ns.iter().position(|&i| i == i_max).expect("member");
                        ns[pos] = q;
                        ns.sort_unstable();
                        sets.reverse[i_max].remove(&p);
                        sets.reverse[q].insert(p);
                    }
                }
            }
        }
        on_iteration(iter, &sets);
    }
    Ok(sets)
}

/// Largest score; ties resolved toward the lower index.
fn argmax(items: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, s) in items {
        if s > best.1 || (s == best.1 && i < best.0) {
            best = (i, s);
        }
    }
    best
}

/// Per-item clusters with neighbors beyond `drop_distance` removed.
pub fn build_clusters(
    ds: &DatasetIndex,
    ns: &NeighborSets,
    drop_distance: f64,
) -> Result<Vec<Cluster>> {
    if ns.neighbors.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            what: "neighbor sets",
            expected: ds.len(),
            got: ns.neighbors.len(),
        });
    }
    ns.neighbors
        .iter()
        .enumerate()
        .map(|(p, members)| {
            let mut entries = members
                .iter()
                .map(|&i| {
                    let item = ds
                        .items
                        .get(i)
                        .ok_or_else(|| Error::Format(format!("neighbor {i} out of range")))?;
                    Ok(ClusterEntry {
                        index: i,
                        keypoints: item.keypoints.clone(),
                        camera: item.camera,
                        intrinsics: item.intrinsics,
                        distance: rep_distance(&ds.items[p].rep, &item.rep)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.retain(|e| e.distance <= drop_distance);
            entries.sort_by(|a, b| {
                a.distance
                    .total_cmp(&b.distance)
                    .then(a.index.cmp(&b.index))
            });
            Ok(Cluster { anchor: p, entries })
        })
        .collect()
}

/// Fraction of approximate neighbors no farther than the k-th exact neighbor
/// (plus `tie_tol`). Equal-distance neighbors are interchangeable.
pub fn recall(ds: &DatasetIndex, approx: &NeighborSets, k: usize, tie_tol: f64) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, ns) in approx.neighbors.iter().enumerate() {
        let ranked = ranked_from(ds, p);
        let kth = ranked[k.min(ranked.len()) - 1].0;
        for &i in ns {
            total += 1;
            if rep_distance(&ds.items[p].rep, &ds.items[i].rep).expect("validated") <= kth + tie_tol
            {
                hits += 1;
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Plain set overlap with the exact neighbor lists.
pub fn set_recall(approx: &NeighborSets, exact: &NeighborSets) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (a, e) in approx.neighbors.iter().zip(&exact.neighbors) {
        total += e.len();
        hits += a.iter().filter(|i| e.contains(i)).count();
    }
    hits as f64 / total.max(1) as f64
}
