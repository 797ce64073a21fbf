//! Trait-ordered micro-segments over trajectory direction angles.
//!
//! The hierarchy itself is label-driven: depth `d` groups customers by the
//! first `d` entries of their dominant order. Whether the angles actually
//! separate those groups is measured separately by k-means purity against
//! a permutation null.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{trait_from_initial, DominantOrder, TRAIT_INITIALS};
use crate::error::{Error, Result};
use crate::rnn::{extract_trajectories, LstmModel, Trajectory, Vec3};
use crate::scalar::Scalar;
use crate::surrogate::{circular_mean, trajectory_angles, wrap_angle, DirectionAngles, DirectionMode};
use crate::synth::{Customer, Dataset};

pub const MAX_DEPTH: usize = 4;
pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 100;
/// Label shuffles averaged into a permutation-null purity.
pub const NULL_PERMUTATIONS: usize = 20;
pub const DEFAULT_TURN_THRESHOLD: f64 = std::f64::consts::FRAC_PI_4;

/// `(θ − offset, φ)` as a point in the plane used by k-means.
pub fn plane_point<T: Scalar>(a: &DirectionAngles<T>, azimuth_offset: f64) -> [f64; 2] {
    [wrap_angle(a.theta.as_f64() - azimuth_offset), a.phi.as_f64()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub inertia: f64,
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn plus_plus_init(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>) -> KMeans {
    let k = centroids.len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&x, &y| dist2(p, &centroids[x]).total_cmp(&dist2(p, &centroids[y])))
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (&a, p) in assignments.iter().zip(points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += 1.0;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        // An emptied cluster takes over the point farthest from its centroid.
        for j in 0..k {
            if sums[j][2] == 0.0 {
                let far = (0..points.len())
                    .max_by(|&x, &y| {
                        dist2(&points[x], &centroids[assignments[x]]).total_cmp(&dist2(&points[y], &centroids[assignments[y]]))
                    })
                    .expect("non-empty");
                centroids[j] = points[far];
                assignments[far] = j;
            }
        }
    }
    let inertia = assignments
        .iter()
        .zip(points)
        .map(|(&a, p)| dist2(p, &centroids[a]))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

/// Best of `restarts` k-means++ runs by inertia; restart `r` draws from its own stream seeded `seed + r`.
pub fn kmeans(points: &[[f64; 2]], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Config(format!("{} points cannot form {k} clusters", points.len())));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Config("k-means input contains non-finite coordinates".into()));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let run = lloyd(points, plus_plus_init(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `Σ_clusters max label count / N`
pub fn purity_of(assignments: &[usize], labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((a, _), c) in counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    best.values().sum::<usize>() as f64 / assignments.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityResult {
    pub k: usize,
    pub n: usize,
    pub purity: f64,
    /// Mean purity of the same clustering against shuffled labels.
    pub null_purity: f64,
}

impl PurityResult {
    pub fn excess(&self) -> f64 {
        self.purity - self.null_purity
    }
}

pub fn geometric_purity(points: &[[f64; 2]], labels: &[usize], k: usize, seed: u64) -> Result<PurityResult> {
    if points.len() != labels.len() {
        return Err(Error::Dimension(format!("{} points vs {} labels", points.len(), labels.len())));
    }
    let clustering = kmeans(points, k, KMEANS_RESTARTS, seed)?;
    let purity = purity_of(&clustering.assignments, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
    let mut shuffled = labels.to_vec();
    let mut null = 0.0;
    for _ in 0..NULL_PERMUTATIONS {
        shuffled.shuffle(&mut rng);
        null += purity_of(&clustering.assignments, &shuffled);
    }
    Ok(PurityResult {
        k,
        n: points.len(),
        purity,
        null_purity: null / NULL_PERMUTATIONS as f64,
    })
}

mod trait_keys {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &[usize], s: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<String> = key.iter().map(|&t| TRAIT_INITIALS[t].to_string()).collect();
        names.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| {
                let mut chars = n.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => trait_from_initial(c).map_err(serde::de::Error::custom),
                    _ => Err(serde::de::Error::custom(format!("bad trait key {n:?}"))),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    /// Order prefix, e.g. `["N", "C"]` on disk.
    #[serde(with = "trait_keys")]
    pub key: Vec<usize>,
    pub member_count: usize,
    pub members: Vec<String>,
    /// Circular mean azimuth, arithmetic mean elevation.
    pub centroid: DirectionAngles<f64>,
    /// k-means purity of the members against the next trait in their order.
    pub subcluster_purity: Option<PurityResult>,
}

impl ClusterNode {
    pub fn depth(&self) -> usize {
        self.key.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub depth: usize,
    pub azimuth_offset: f64,
    /// Depth-major, keys ascending within a depth.
    pub nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn level(&self, depth: usize) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(move |n| n.depth() == depth)
    }

    pub fn node(&self, key: &[usize]) -> Option<&ClusterNode> {
        self.nodes.iter().find(|n| n.key == key)
    }

    pub fn children<'a>(&'a self, parent: &'a ClusterNode) -> impl Iterator<Item = &'a ClusterNode> {
        self.level(parent.depth() + 1).filter(move |n| n.key.starts_with(&parent.key))
    }

    /// Depth-1 node whose centroid is closest on the sphere.
    pub fn nearest_top_level<T: Scalar>(&self, a: &DirectionAngles<T>) -> Option<&ClusterNode> {
        let u = to_f64(a).unit_vector();
        self.level(1).min_by(|x, y| {
            let dx = angle_between(&u, &x.centroid.unit_vector());
            let dy = angle_between(&u, &y.centroid.unit_vector());
            dx.total_cmp(&dy)
        })
    }
}

fn to_f64<T: Scalar>(a: &DirectionAngles<T>) -> DirectionAngles<f64> {
    DirectionAngles {
        theta: a.theta.as_f64(),
        phi: a.phi.as_f64(),
    }
}

/// `arccos(u · v)` for unit vectors, clamped against rounding.
pub fn angle_between(u: &[f64; 3], v: &[f64; 3]) -> f64 {
    (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0).acos()
}

pub fn centroid<T: Scalar>(angles: &[&DirectionAngles<T>]) -> DirectionAngles<f64> {
    let theta = circular_mean(angles.iter().map(|a| a.theta.as_f64()));
    let phi = angles.iter().map(|a| a.phi.as_f64()).sum::<f64>() / angles.len().max(1) as f64;
    DirectionAngles { theta, phi }
}

/// Groups customers by order prefix up to `depth` levels.
pub fn build_hierarchy<T: Scalar>(
    customer_ids: &[String],
    angles: &[DirectionAngles<T>],
    orders: &[DominantOrder],
    depth: usize,
    azimuth_offset: f64,
) -> Result<ClusterTree> {
    if !(1..=MAX_DEPTH).contains(&depth) {
        return Err(Error::Config(format!("hierarchy depth {depth} outside 1..={MAX_DEPTH}")));
    }
    if customer_ids.len() != angles.len() || angles.len() != orders.len() {
        return Err(Error::Dimension(format!(
            "{} ids, {} angle pairs and {} orders",
            customer_ids.len(),
            angles.len(),
            orders.len()
        )));
    }
    let mut nodes = Vec::new();
    for d in 1..=depth {
        let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        for (i, o) in orders.iter().enumerate() {
            groups.entry(o.prefix(d)).or_default().push(i);
        }
        for (key, idx) in groups {
            let members: Vec<&DirectionAngles<T>> = idx.iter().map(|&i| &angles[i]).collect();
            nodes.push(ClusterNode {
                key: key.to_vec(),
                member_count: idx.len(),
                members: idx.iter().map(|&i| customer_ids[i].clone()).collect(),
                centroid: centroid(&members),
                subcluster_purity: None,
            });
        }
    }
    Ok(ClusterTree {
        depth,
        azimuth_offset,
        nodes,
    })
}

/// Fills `subcluster_purity` for every node below the deepest level with at least `min_members` members.
///
/// Members are clustered with `k` equal to the number of distinct next
/// traits among them; nodes with a single next trait are skipped.
pub fn annotate_subcluster_purity<T: Scalar>(
    tree: &mut ClusterTree,
    customer_ids: &[String],
    angles: &[DirectionAngles<T>],
    orders: &[DominantOrder],
    min_members: usize,
    seed: u64,
) -> Result<()> {
    let index: BTreeMap<&str, usize> = customer_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let max_depth = tree.depth;
    let offset = tree.azimuth_offset;
    for (n, node) in tree.nodes.iter_mut().enumerate() {
        let d = node.depth();
        if d >= max_depth.min(MAX_DEPTH) || node.member_count < min_members.max(2) {
            continue;
        }
        let rows: Vec<usize> = node
            .members
            .iter()
            .map(|m| {
                index
                    .get(m.as_str())
                    .copied()
                    .ok_or_else(|| Error::Schema(format!("hierarchy member {m} has no angles")))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = rows.iter().map(|&i| orders[i].at(d)).collect();
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            continue;
        }
        let points: Vec<[f64; 2]> = rows.iter().map(|&i| plane_point(&angles[i], offset)).collect();
        node.subcluster_purity = Some(geometric_purity(
            &points,
            &labels,
            distinct.len(),
            seed.wrapping_add(1000 * n as u64),
        )?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub customer_id: String,
    pub coarse_cluster: usize,
    pub fine_cluster: usize,
    pub divergence_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub coarse_window: usize,
    pub fine_window: usize,
    pub agreement_rate: f64,
    pub n_compared: usize,
    /// Customers dropped because either trajectory had no direction.
    pub n_degenerate: usize,
    pub mean_divergence_rad: f64,
    pub entries: Vec<StabilityEntry>,
}

/// Compares depth-1 assignments of each selected customer under two aggregation windows.
///
/// Depth-1 centroids come from the coarse-window angles grouped by each
/// customer's dominant trait; both windows are assigned to the nearest
/// centroid by great-circle distance.
pub fn stability_check<T: Scalar>(
    model: &LstmModel<T>,
    dataset: &Dataset<T>,
    coarse: usize,
    fine: usize,
    mode: DirectionMode,
    include: impl Fn(&Customer<T>) -> bool,
) -> Result<StabilityReport> {
    let coarse_traj = extract_trajectories(model, dataset, coarse)?;
    let fine_traj = if fine == coarse {
        coarse_traj.clone()
    } else {
        extract_trajectories(model, dataset, fine)?
    };
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    let mut orders = Vec::new();
    let mut n_degenerate = 0;
    for ((c, tc), tf) in dataset.customers.iter().zip(&coarse_traj).zip(&fine_traj) {
        if !include(c) {
            continue;
        }
        match (trajectory_angles(tc, mode), trajectory_angles(tf, mode)) {
            (Ok(a), Ok(b)) => {
                ids.push(c.customer_id.clone());
                pairs.push((a, b));
                orders.push(c.order);
            }
            (Err(Error::DegenerateTrajectory { .. }), _) | (_, Err(Error::DegenerateTrajectory { .. })) => {
                n_degenerate += 1
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset("no customer has usable trajectories in both windows".into()));
    }
    let coarse_angles: Vec<DirectionAngles<T>> = pairs.iter().map(|p| p.0).collect();
    let tree = build_hierarchy(&ids, &coarse_angles, &orders, 1, 0.0)?;
    let slot = |a: &DirectionAngles<T>| -> usize {
        tree.nearest_top_level(a).expect("at least one depth-1 node").key[0]
    };
    let entries: Vec<StabilityEntry> = ids
        .into_iter()
        .zip(&pairs)
        .map(|(id, (a, b))| StabilityEntry {
            customer_id: id,
            coarse_cluster: slot(a),
            fine_cluster: slot(b),
            divergence_rad: angle_between(&to_f64(a).unit_vector(), &to_f64(b).unit_vector()),
        })
        .collect();
    let n = entries.len();
    let agree = entries.iter().filter(|e| e.coarse_cluster == e.fine_cluster).count();
    Ok(StabilityReport {
        coarse_window: coarse,
        fine_window: fine,
        agreement_rate: agree as f64 / n as f64,
        n_compared: n,
        n_degenerate,
        mean_divergence_rad: entries.iter().map(|e| e.divergence_rad).sum::<f64>() / n as f64,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseChange {
    /// Index `t` of the first point reached by a step that turns away from
    /// the previous step by more than the threshold.
    pub period: Option<usize>,
    /// Indices of zero-length steps that were ignored.
    pub skipped_steps: Vec<usize>,
}

/// Earliest sharp turn along `h_0, h_1, …` (0-based point indices).
///
/// Step `t` runs from point `t − 1` to point `t`; each non-zero step is
/// compared with the previous non-zero step.
pub fn detect_course_change<T: Scalar>(trajectory: &Trajectory<T>, threshold: f64) -> Result<CourseChange> {
    if trajectory.len() < 3 {
        return Err(Error::Dimension(format!(
            "course change needs at least 3 points, trajectory {} has {}",
            trajectory.customer_id,
            trajectory.len()
        )));
    }
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::Config(format!("turn threshold {threshold} must be finite and >= 0")));
    }
    let p: Vec<[f64; 3]> = trajectory.points.iter().map(|q| q.map(|v| v.as_f64())).collect();
    let mut skipped = Vec::new();
    let mut previous: Option<Vec3<f64>> = None;
    for t in 1..p.len() {
        let step = [p[t][0] - p[t - 1][0], p[t][1] - p[t - 1][1], p[t][2] - p[t - 1][2]];
        let norm = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
        if norm == 0.0 {
            skipped.push(t);
            continue;
        }
        let unit = step.map(|v| v / norm);
        if let Some(prev) = previous {
            if angle_between(&prev, &unit) > threshold {
                return Ok(CourseChange {
                    period: Some(t),
                    skipped_steps: skipped,
                });
            }
        }
        previous = Some(unit);
    }
    Ok(CourseChange {
        period: None,
        skipped_steps: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn order(o: [usize; 5]) -> DominantOrder {
        DominantOrder::from_order(o).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn a(theta: f64, phi: f64) -> DirectionAngles<f64> {
        DirectionAngles { theta, phi }
    }

    #[test]
    fn single_dominant_trait_gives_one_node() {
        let orders = vec![order([2, 0, 1, 3, 4]); 4];
        let angles = vec![a(0.1, 0.0); 4];
        let tree = build_hierarchy(&ids(4), &angles, &orders, 1, 0.0).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.nodes[0].key, vec![2]);
        assert_eq!(tree.nodes[0].member_count, 4);
    }

    #[test]
    fn second_level_partitions_the_parent() {
        let orders = vec![
            order([0, 1, 2, 3, 4]),
            order([0, 2, 1, 3, 4]),
            order([0, 1, 3, 2, 4]),
        ];
        let angles = vec![a(0.0, 0.0); 3];
        let tree = build_hierarchy(&ids(3), &angles, &orders, 2, 0.0).unwrap();
        let root = tree.node(&[0]).unwrap();
        let kids: Vec<&ClusterNode> = tree.children(root).collect();
        assert_eq!(kids.iter().map(|k| k.key.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![0, 2]]);
        let mut union: Vec<String> = kids.iter().flat_map(|k| k.members.clone()).collect();
        union.sort();
        let mut parent = root.members.clone();
        parent.sort();
        assert_eq!(union, parent);
    }

    #[test]
    fn depth_must_be_one_to_four() {
        let orders = vec![order([0, 1, 2, 3, 4])];
        let angles = vec![a(0.0, 0.0)];
        assert!(matches!(build_hierarchy(&ids(1), &angles, &orders, 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(build_hierarchy(&ids(1), &angles, &orders, 5, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn centroid_azimuth_is_circular() {
        let x = a(std::f64::consts::PI - 0.1, 0.2);
        let y = a(-std::f64::consts::PI + 0.1, 0.4);
        let c = centroid(&[&x, &y]);
        assert!((c.theta.abs() - std::f64::consts::PI).abs() < 1e-12);
        assert!((c.phi - 0.3).abs() < 1e-12);
    }

    #[test]
    fn hierarchy_keys_serialize_as_initials() {
        let orders = vec![order([4, 1, 0, 2, 3])];
        let tree = build_hierarchy(&ids(1), &[a(0.0, 0.0)], &orders, 2, 0.0).unwrap();
        let json = serde_json::to_string(&tree).unwrap();
        assert!(json.contains(r#""key":["N","C"]"#), "{json}");
        let back: ClusterTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tree);
    }

    fn blobs(centres: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push([
                    c[0] + rng.random_range(-spread..spread),
                    c[1] + rng.random_range(-spread..spread),
                ]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn separated_groups_are_pure() {
        let (pts, labels) = blobs(&[[-1.0, 0.0], [1.0, 0.5]], 50, 0.1, 3);
        let r = geometric_purity(&pts, &labels, 2, 9).unwrap();
        assert_eq!(r.purity, 1.0);
        assert!(r.null_purity < 0.7);
    }

    #[test]
    fn random_labels_have_low_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 2]> = (0..1000)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let r = geometric_purity(&pts, &labels, 5, 2).unwrap();
        assert!(r.purity < 0.35, "{r:?}");
    }

    #[test]
    fn one_cluster_purity_is_the_modal_frequency() {
        let pts = vec![[0.0, 0.0]; 10];
        let labels = vec![0, 0, 0, 1, 1, 2, 0, 0, 1, 2];
        assert!((geometric_purity(&pts, &labels, 1, 0).unwrap().purity - 0.5).abs() < 1e-15);
    }

    #[test]
    fn too_few_points_for_k() {
        assert!(matches!(
            geometric_purity(&[[0.0, 0.0]], &[0], 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (pts, _) = blobs(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], 30, 0.4, 5);
        assert_eq!(kmeans(&pts, 3, 20, 7).unwrap(), kmeans(&pts, 3, 20, 7).unwrap());
    }

    fn traj(points: Vec<[f64; 3]>) -> Trajectory<f64> {
        Trajectory {
            customer_id: "t".into(),
            points,
        }
    }

    #[test]
    fn straight_line_has_no_course_change() {
        let t = traj((0..6).map(|i| [i as f64 * 0.1, 0.0, 0.05 * i as f64]).collect());
        assert_eq!(detect_course_change(&t, FRAC_PI_4).unwrap().period, None);
    }

    #[test]
    fn right_angle_turn_is_located() {
        let t = traj(vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.2, 0.0, 0.0],
            [0.2, 0.1, 0.0],
            [0.2, 0.2, 0.0],
        ]);
        assert_eq!(detect_course_change(&t, FRAC_PI_4).unwrap().period, Some(3));
        assert_eq!(detect_course_change(&t, FRAC_PI_2 + 0.01).unwrap().period, None);
    }

    #[test]
    fn zero_steps_are_skipped_and_noted() {
        let t = traj(vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.1, 0.1, 0.0],
        ]);
        let c = detect_course_change(&t, FRAC_PI_4).unwrap();
        assert_eq!(c.skipped_steps, vec![2]);
        assert_eq!(c.period, Some(3));
        assert!(detect_course_change(&traj(vec![[0.0; 3]; 2]), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn constant_steps_never_turn(
            start in prop::array::uniform3(-0.5f64..0.5),
            step in prop::array::uniform3(-0.1f64..0.1),
            n in 3usize..10,
            threshold in 1e-3f64..3.0,
        ) {
            prop_assume!(step.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let t = traj((0..n).map(|i| {
                let s = i as f64;
                [start[0] + s * step[0], start[1] + s * step[1], start[2] + s * step[2]]
            }).collect());
            prop_assert_eq!(detect_course_change(&t, threshold).unwrap().period, None);
        }

        #[test]
        fn purity_ignores_label_names(seed in any::<u64>(), perm in Just([3usize, 0, 4, 1, 2]).prop_shuffle()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..60).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..5)).collect();
            let renamed: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let a = geometric_purity(&pts, &labels, 4, 1).unwrap();
            let b = geometric_purity(&pts, &renamed, 4, 1).unwrap();
            prop_assert_eq!(a.purity, b.purity);
        }

        #[test]
        fn children_partition_parents(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let orders: Vec<DominantOrder> = (0..n).map(|_| {
                let mut o = [0, 1, 2, 3, 4];
                o.shuffle(&mut rng);
                order(o)
            }).collect();
            let angles: Vec<DirectionAngles<f64>> = (0..n).map(|_| a(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5))).collect();
            let tree = build_hierarchy(&ids(n), &angles, &orders, 4, 0.0).unwrap();
            for parent in tree.nodes.iter().filter(|p| p.depth() < 4) {
                let mut union: Vec<String> = tree.children(parent).flat_map(|k| k.members.clone()).collect();
                union.sort();
                let mut members = parent.members.clone();
                members.sort();
                prop_assert_eq!(union, members);
            }
        }
    }
}
