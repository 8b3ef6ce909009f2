//! Adaptive density control: gradient-driven splitting, compactness-based
//! densification, and pruning.
//!
//! The three operations are pure scene-to-scene transforms. Each returns an
//! outcome struct describing exactly what changed so the optimizer can remap
//! its per-parameter state and the trainer can log structured events.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::GsError;
use crate::gaussians::GaussianCloud;
use crate::grad::ParamGrads;
use crate::math::{c, Real};
use crate::rasterizer::project;

/// Direction of the compactness trigger.
///
/// `Overlap` is the literal published condition (insert where neighbors
/// overlap, `d < r_i + r_j`); `Gap` is the hole-filling variant
/// (`d > r_i + r_j`, radius `d − r_i − r_j`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompactCondition {
    Overlap,
    Gap,
}

/// Densification and pruning thresholds and schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Average view-space position-gradient norm above which a Gaussian is
    /// split (strict >).
    pub t_pos: f64,
    pub split_interval: usize,
    pub compact_interval: usize,
    pub prune_interval: usize,
    /// Activated opacity below which a Gaussian is pruned (strict <).
    pub alpha_min: f64,
    pub knn_k: usize,
    pub split_scale_divisor: f64,
    /// World-space radius (max activated scale axis) above which a Gaussian
    /// is pruned (strict >).
    pub max_world_radius: f64,
    /// Last projected 3σ screen radius above which a Gaussian is pruned
    /// (strict >).
    pub max_view_radius_px: f64,
    pub condition: CompactCondition,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            t_pos: 0.02,
            split_interval: 500,
            compact_interval: 1000,
            prune_interval: 200,
            alpha_min: 0.05,
            knn_k: 3,
            split_scale_divisor: 1.6,
            max_world_radius: 0.5,
            max_view_radius_px: 0.2 * 512.0,
            condition: CompactCondition::Overlap,
        }
    }
}

impl DensifyConfig {
    /// Default config with the view-radius bound tied to an image width.
    pub fn for_image_width(width: usize) -> Self {
        DensifyConfig {
            max_view_radius_px: 0.2 * width as f64,
            ..DensifyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GsError> {
        if self.t_pos <= 0.0
            || self.alpha_min <= 0.0
            || self.split_scale_divisor <= 0.0
            || self.max_world_radius <= 0.0
            || self.max_view_radius_px <= 0.0
            || self.knn_k == 0
        {
            return Err(GsError::invalid("adaptive thresholds must be positive"));
        }
        if self.split_interval == 0 || self.compact_interval == 0 || self.prune_interval == 0 {
            return Err(GsError::invalid("adaptive intervals must be >= 1"));
        }
        Ok(())
    }
}

/// Running per-Gaussian view-space gradient statistics since the last
/// densification event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccumulator<T = f32> {
    pub sums: Vec<T>,
    pub counts: Vec<u32>,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(n: usize) -> Self {
        GradAccumulator {
            sums: vec![T::zero(); n],
            counts: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    /// Clears the statistics, resizing to the (possibly changed) scene size.
    pub fn reset(&mut self, n: usize) {
        self.sums.clear();
        self.sums.resize(n, T::zero());
        self.counts.clear();
        self.counts.resize(n, 0);
    }

    /// Grows the accumulator with zeroed slots for freshly inserted Gaussians.
    pub fn extend_zeros(&mut self, n_new: usize) {
        self.sums.resize(self.sums.len() + n_new, T::zero());
        self.counts.resize(self.counts.len() + n_new, 0);
    }

    /// Keeps only the listed indices (ascending), mirroring a prune.
    pub fn retain_indices(&mut self, kept: &[usize]) {
        self.sums = kept.iter().map(|&i| self.sums[i]).collect();
        self.counts = kept.iter().map(|&i| self.counts[i]).collect();
    }

    /// Adds one backward pass worth of view-space gradient norms. Counts
    /// advance only for Gaussians that were visible in that pass.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<(), GsError> {
        if grads.len() != self.len() {
            return Err(GsError::ShapeMismatch(format!(
                "accumulator tracks {} gaussians, gradients have {}",
                self.len(),
                grads.len()
            )));
        }
        for i in 0..self.len() {
            if grads.visible[i] {
                self.sums[i] += grads.view_space_pos_grad_norm[i];
                self.counts[i] += 1;
            }
        }
        Ok(())
    }

    /// Average accumulated norm; zero for Gaussians never seen.
    pub fn average(&self, i: usize) -> T {
        if self.counts[i] == 0 {
            T::zero()
        } else {
            self.sums[i] / c::<T>(self.counts[i] as f64)
        }
    }
}

/// Result of [`split_by_gradient`]. The first child of parent
/// `split_indices[k]` overwrites the parent's slot; the second child is
/// appended at index `n_before + k`.
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub split_indices: Vec<usize>,
    pub n_before: usize,
    pub n_after: usize,
}

/// Splits every Gaussian whose average view-space gradient norm exceeds
/// `cfg.t_pos` into two children sampled from the parent's density, with
/// scales divided by `cfg.split_scale_divisor`. Resets the accumulator.
pub fn split_by_gradient<T: Real, R: Rng>(
    cloud: &mut GaussianCloud<T>,
    acc: &mut GradAccumulator<T>,
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<SplitOutcome, GsError> {
    if acc.len() != cloud.len() {
        return Err(GsError::ShapeMismatch(format!(
            "accumulator tracks {} gaussians, cloud has {}",
            acc.len(),
            cloud.len()
        )));
    }
    let act = cloud.activate()?;
    let n_before = cloud.len();
    let threshold = c::<T>(cfg.t_pos);
    let split_indices: Vec<usize> = (0..n_before)
        .filter(|&i| acc.average(i) > threshold)
        .collect();

    let log_div = c::<T>(cfg.split_scale_divisor.ln());
    let shrink = Vector3::new(log_div, log_div, log_div);
    let mut second = GaussianCloud::<T> {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        color_params: Vec::new(),
        opacity_logits: Vec::new(),
        snapshot_positions: None,
    };
    for &i in &split_indices {
        let rot = crate::math::rotation_from_unit_quat(&act.rotations[i]);
        let mut sample = || {
            let n = Vector3::new(
                c::<T>(rng.sample(StandardNormal)),
                c::<T>(rng.sample(StandardNormal)),
                c::<T>(rng.sample(StandardNormal)),
            );
            act.positions[i] + rot * n.component_mul(&act.scales[i])
        };
        let first_pos = sample();
        let second_pos = sample();

        cloud.positions[i] = first_pos;
        cloud.log_scales[i] -= shrink;
        if let Some(s) = cloud.snapshot_positions.as_mut() {
            s[i] = first_pos;
        }

        second.positions.push(second_pos);
        second.log_scales.push(cloud.log_scales[i]);
        second.rotations.push(cloud.rotations[i]);
        second.color_params.push(cloud.color_params[i]);
        second.opacity_logits.push(cloud.opacity_logits[i]);
    }
    cloud.append(second);

    let n_after = cloud.len();
    acc.reset(n_after);
    Ok(SplitOutcome {
        split_indices,
        n_before,
        n_after,
    })
}

/// One midpoint insertion performed by [`densify_compactness`]. Carries the
/// pair geometry at insertion time so logged events can be re-verified
/// without replaying the whole optimization.
#[derive(Clone, Debug)]
pub struct Insertion<T = f32> {
    pub pair: (usize, usize),
    pub position: Vector3<T>,
    pub radius: T,
    pub parent_positions: [Vector3<T>; 2],
    pub parent_radii: [T; 2],
}

/// Result of [`densify_compactness`]; inserted Gaussians occupy indices
/// `n_before..n_after` in pair order.
#[derive(Clone, Debug)]
pub struct CompactnessOutcome<T = f32> {
    pub insertions: Vec<Insertion<T>>,
    pub n_before: usize,
    pub n_after: usize,
}

const MIN_INSERT_RADIUS: f64 = 1e-4;

/// Inserts an isotropic Gaussian between each qualifying k-NN pair: at the
/// midpoint, with radius `|r_i + r_j − d|` (overlap condition `d < r_i+r_j`)
/// where `r` is the mean activated scale axis; color and opacity are the
/// parameter-space average of the pair; rotation is the identity. Each
/// unordered pair is processed at most once.
pub fn densify_compactness<T: Real>(
    cloud: &mut GaussianCloud<T>,
    cfg: &DensifyConfig,
) -> Result<CompactnessOutcome<T>, GsError> {
    let act = cloud.activate()?;
    let n_before = cloud.len();
    let third = c::<T>(1.0 / 3.0);
    let radii: Vec<T> = act.scales.iter().map(|s| (s[0] + s[1] + s[2]) * third).collect();

    let tree = KdTree::build(&cloud.positions);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n_before {
        for (_, j) in tree.nearest(&cloud.positions[i], cfg.knn_k + 1) {
            if j != i {
                pairs.push((i.min(j), i.max(j)));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    let min_radius = c::<T>(MIN_INSERT_RADIUS);
    let half = c::<T>(0.5);
    let mut insertions = Vec::new();
    let mut inserted = GaussianCloud::<T> {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        color_params: Vec::new(),
        opacity_logits: Vec::new(),
        snapshot_positions: None,
    };
    for (i, j) in pairs {
        let d = (cloud.positions[i] - cloud.positions[j]).norm();
        let sum_r = radii[i] + radii[j];
        let radius = match cfg.condition {
            CompactCondition::Overlap if d < sum_r => (sum_r - d).abs(),
            CompactCondition::Gap if d > sum_r => d - sum_r,
            _ => continue,
        }
        .max(min_radius);
        let position = (cloud.positions[i] + cloud.positions[j]) * half;
        inserted.positions.push(position);
        let lr = radius.ln();
        inserted.log_scales.push(Vector3::new(lr, lr, lr));
        inserted.rotations.push(Vector4::new(T::one(), T::zero(), T::zero(), T::zero()));
        inserted
            .color_params
            .push((cloud.color_params[i] + cloud.color_params[j]) * half);
        inserted
            .opacity_logits
            .push((cloud.opacity_logits[i] + cloud.opacity_logits[j]) * half);
        insertions.push(Insertion {
            pair: (i, j),
            position,
            radius,
            parent_positions: [cloud.positions[i], cloud.positions[j]],
            parent_radii: [radii[i], radii[j]],
        });
    }
    cloud.append(inserted);

    Ok(CompactnessOutcome {
        insertions,
        n_before,
        n_after: cloud.len(),
    })
}

/// Result of [`prune`]: `kept[new_index] = old_index`.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub kept: Vec<usize>,
    pub n_before: usize,
    pub n_after: usize,
}

/// Per-Gaussian projected 3σ screen radii (pixels) for the pruning rule;
/// zero for Gaussians culled in this view.
pub fn view_screen_radii<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
) -> Result<Vec<T>, GsError> {
    cam.validate()?;
    let act = cloud.activate()?;
    let mut radii = vec![T::zero(); cloud.len()];
    for g in project(&act, cam) {
        radii[g.source_index as usize] = c::<T>(3.0) * g.sigma_max;
    }
    Ok(radii)
}

/// Removes Gaussians with activated opacity `< alpha_min`, world radius
/// `> max_world_radius`, or last view radius `> max_view_radius_px`. Never
/// removes the final Gaussian: if everything qualifies, the highest-opacity
/// one (lowest index on ties) survives.
pub fn prune<T: Real>(
    cloud: &mut GaussianCloud<T>,
    cfg: &DensifyConfig,
    view_radii_px: Option<&[T]>,
) -> Result<PruneOutcome, GsError> {
    let act = cloud.activate()?;
    let n_before = cloud.len();
    if let Some(r) = view_radii_px {
        if r.len() != n_before {
            return Err(GsError::ShapeMismatch(format!(
                "{} view radii for {} gaussians",
                r.len(),
                n_before
            )));
        }
    }
    let alpha_min = c::<T>(cfg.alpha_min);
    let max_world = c::<T>(cfg.max_world_radius);
    let max_view = c::<T>(cfg.max_view_radius_px);
    let mut keep: Vec<bool> = (0..n_before)
        .map(|i| {
            let s = act.scales[i];
            let world = s[0].max(s[1]).max(s[2]);
            let view = view_radii_px.map_or(T::zero(), |r| r[i]);
            !(act.opacities[i] < alpha_min || world > max_world || view > max_view)
        })
        .collect();
    if keep.iter().all(|&k| !k) {
        let mut best = 0;
        for i in 1..n_before {
            if act.opacities[i] > act.opacities[best] {
                best = i;
            }
        }
        keep[best] = true;
    }
    let kept: Vec<usize> = (0..n_before).filter(|&i| keep[i]).collect();
    cloud.retain_mask(&keep);
    Ok(PruneOutcome {
        kept,
        n_before,
        n_after: cloud.len(),
    })
}

/// Balanced 3D spatial index with exact k-nearest-neighbor queries.
///
/// Queries order candidates by (squared distance, index), so ties are broken
/// by the lower index and results match a brute-force scan exactly.
#[derive(Clone, Debug)]
pub struct KdTree<T = f32> {
    points: Vec<Vector3<T>>,
    nodes: Vec<KdNode>,
    root: i32,
}

#[derive(Clone, Copy, Debug)]
struct KdNode {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Vector3<T>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        tree.root = tree.build_range(&mut order, 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_range(&mut self, order: &mut [u32], depth: usize) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            let ka = self.points[a as usize][axis as usize];
            let kb = self.points[b as usize][axis as usize];
            ka.partial_cmp(&kb).unwrap().then(a.cmp(&b))
        });
        let point = order[mid];
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo, depth + 1);
        let right = self.build_range(hi, depth + 1);
        let id = self.nodes.len() as i32;
        self.nodes.push(KdNode {
            point,
            axis,
            left,
            right,
        });
        id
    }

    /// The `k` nearest points to `query`, as (squared distance, index) in
    /// ascending (distance, index) order.
    pub fn nearest(&self, query: &Vector3<T>, k: usize) -> Vec<(T, usize)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root, query, k, &mut best);
        best
    }

    fn search(&self, node: i32, query: &Vector3<T>, k: usize, best: &mut Vec<(T, usize)>) {
        if node < 0 {
            return;
        }
        let n = self.nodes[node as usize];
        let idx = n.point as usize;
        let d2 = (self.points[idx] - query).norm_squared();
        let cand = (d2, idx);
        let pos = best
            .binary_search_by(|probe| {
                probe.0.partial_cmp(&cand.0).unwrap().then(probe.1.cmp(&cand.1))
            })
            .unwrap_or_else(|e| e);
        if pos < k {
            best.insert(pos, cand);
            best.truncate(k);
        }

        let axis = n.axis as usize;
        let delta = query[axis] - self.points[idx][axis];
        let (near, far) = if delta < T::zero() {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, k, best);
        if best.len() < k || delta * delta <= best[best.len() - 1].0 {
            self.search(far, query, k, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at_camera;
    use crate::math::logit;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_cloud(positions: Vec<Vector3<f32>>, opacity: f32, scale: f32) -> GaussianCloud<f32> {
        let n = positions.len();
        GaussianCloud {
            positions,
            log_scales: vec![Vector3::from_element(scale.ln()); n],
            rotations: vec![Vector4::new(1.0, 0.0, 0.0, 0.0); n],
            color_params: vec![Vector3::new(0.2, -0.1, 0.4); n],
            opacity_logits: vec![logit(opacity); n],
            snapshot_positions: None,
        }
    }

    fn grads_with_norms(norms: &[f32], visible: &[bool]) -> ParamGrads<f32> {
        let mut g = ParamGrads::zeros(
            norms.len(),
            &crate::rasterizer::BackgroundModel::black(),
        );
        g.view_space_pos_grad_norm = norms.to_vec();
        g.visible = visible.to_vec();
        g
    }

    #[test]
    fn invisible_gaussians_do_not_advance_counts() {
        let mut acc = GradAccumulator::<f32>::new(2);
        acc.accumulate(&grads_with_norms(&[0.5, 0.5], &[true, false])).unwrap();
        assert_eq!(acc.counts, vec![1, 0]);
        assert_eq!(acc.average(1), 0.0);
    }

    #[test]
    fn averages_accumulate_arithmetically() {
        let mut acc = GradAccumulator::<f32>::new(1);
        acc.accumulate(&grads_with_norms(&[0.01], &[true])).unwrap();
        acc.accumulate(&grads_with_norms(&[0.01], &[true])).unwrap();
        assert!((acc.average(0) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn average_exactly_at_threshold_does_not_split() {
        let mut cloud = uniform_cloud(vec![Vector3::zeros()], 0.8, 0.05);
        let mut acc = GradAccumulator::<f32>::new(1);
        acc.accumulate(&grads_with_norms(&[0.02], &[true])).unwrap();
        let cfg = DensifyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = split_by_gradient(&mut cloud, &mut acc, &cfg, &mut rng).unwrap();
        assert_eq!(out.n_after, 1);
        assert!(out.split_indices.is_empty());
    }

    #[test]
    fn split_replaces_each_hot_gaussian_with_two_children() {
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)],
            0.8,
            0.05,
        );
        let parent_color = cloud.color_params[0];
        let mut acc = GradAccumulator::<f32>::new(2);
        acc.accumulate(&grads_with_norms(&[0.05, 0.001], &[true, true])).unwrap();
        let cfg = DensifyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = split_by_gradient(&mut cloud, &mut acc, &cfg, &mut rng).unwrap();
        assert_eq!((out.n_before, out.n_after), (2, 3));
        assert_eq!(out.split_indices, vec![0]);
        assert_eq!(cloud.color_params[0], parent_color);
        assert_eq!(cloud.color_params[2], parent_color);
        let expected = 0.05f32.ln() - 1.6f32.ln();
        assert!((cloud.log_scales[0][0] - expected).abs() < 1e-6);
        assert!((cloud.log_scales[2][0] - expected).abs() < 1e-6);
        assert_eq!(acc.len(), 3);
        assert!(acc.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn split_children_stay_within_five_sigma() {
        let sigma = 0.05f32;
        let cfg = DensifyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5_000 {
            let mut cloud = uniform_cloud(vec![Vector3::new(0.1, -0.2, 0.3)], 0.8, sigma);
            let mut acc = GradAccumulator::<f32>::new(1);
            acc.accumulate(&grads_with_norms(&[1.0], &[true])).unwrap();
            split_by_gradient(&mut cloud, &mut acc, &cfg, &mut rng).unwrap();
            for p in &cloud.positions {
                let r = (p - Vector3::new(0.1, -0.2, 0.3)).norm();
                assert!(r < 5.0 * sigma * 3.0f32.sqrt(), "child {r} too far");
            }
        }
    }

    #[test]
    fn well_separated_gaussians_insert_nothing() {
        let r = 0.05f32;
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(4.0 * r, 0.0, 0.0)],
            0.8,
            r,
        );
        let out = densify_compactness(&mut cloud, &DensifyConfig::default()).unwrap();
        assert_eq!(out.n_after, 2);
        assert!(out.insertions.is_empty());
    }

    #[test]
    fn overlapping_pair_inserts_the_residual_midpoint_gaussian() {
        let r = 0.05f32;
        let d = 0.5 * (r + r);
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(d, 0.0, 0.0)],
            0.8,
            r,
        );
        let out = densify_compactness(&mut cloud, &DensifyConfig::default()).unwrap();
        assert_eq!(out.insertions.len(), 1);
        assert_eq!(out.n_after, 3);
        let ins = &out.insertions[0];
        assert_eq!(ins.pair, (0, 1));
        assert!((ins.radius - r).abs() < 1e-6);
        assert!((ins.position - Vector3::new(d / 2.0, 0.0, 0.0)).norm() < 1e-7);
        assert!((cloud.log_scales[2][0] - r.ln()).abs() < 1e-5);
        assert_eq!(cloud.rotations[2], Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(cloud.color_params[2], cloud.color_params[0]);
    }

    #[test]
    fn coincident_pair_inserts_radius_sum() {
        let r = 0.03f32;
        let mut cloud = uniform_cloud(vec![Vector3::zeros(), Vector3::zeros()], 0.8, r);
        let out = densify_compactness(&mut cloud, &DensifyConfig::default()).unwrap();
        assert_eq!(out.insertions.len(), 1);
        assert!((out.insertions[0].radius - 2.0 * r).abs() < 1e-6);
    }

    #[test]
    fn mutual_neighbors_are_processed_once() {
        let r = 0.05f32;
        let mut cloud = uniform_cloud(
            vec![
                Vector3::zeros(),
                Vector3::new(0.04, 0.0, 0.0),
                Vector3::new(0.0, 0.04, 0.0),
            ],
            0.8,
            r,
        );
        let out = densify_compactness(&mut cloud, &DensifyConfig::default()).unwrap();
        // Three mutually overlapping points: pairs (0,1), (0,2), (1,2), each
        // exactly once even though k-NN reports both directions.
        assert_eq!(out.insertions.len(), 3);
        let pairs: Vec<_> = out.insertions.iter().map(|i| i.pair).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn gap_condition_fills_holes_instead() {
        let r = 0.05f32;
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0)],
            0.8,
            r,
        );
        let cfg = DensifyConfig {
            condition: CompactCondition::Gap,
            ..DensifyConfig::default()
        };
        let out = densify_compactness(&mut cloud, &cfg).unwrap();
        assert_eq!(out.insertions.len(), 1);
        assert!((out.insertions[0].radius - (0.3 - 2.0 * r)).abs() < 1e-6);
    }

    #[test]
    fn prune_applies_the_strict_opacity_threshold() {
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0)],
            0.8,
            0.05,
        );
        cloud.opacity_logits[0] = logit(0.049f32);
        cloud.opacity_logits[1] = logit(0.051f32);
        let out = prune(&mut cloud, &DensifyConfig::default(), None).unwrap();
        assert_eq!(out.kept, vec![1]);
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn prune_keeps_the_strongest_gaussian_as_sole_survivor() {
        let mut cloud = uniform_cloud(
            vec![
                Vector3::zeros(),
                Vector3::new(0.1, 0.0, 0.0),
                Vector3::new(0.2, 0.0, 0.0),
            ],
            0.8,
            0.05,
        );
        cloud.opacity_logits = vec![logit(0.01f32), logit(0.04), logit(0.02)];
        let out = prune(&mut cloud, &DensifyConfig::default(), None).unwrap();
        assert_eq!(out.kept, vec![1]);
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn prune_drops_oversized_world_radii() {
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0)],
            0.8,
            0.05,
        );
        cloud.log_scales[0] = Vector3::new(5.0f32.ln(), -3.0, -3.0);
        let out = prune(&mut cloud, &DensifyConfig::default(), None).unwrap();
        assert_eq!(out.kept, vec![1]);
    }

    #[test]
    fn prune_drops_oversized_view_radii() {
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0)],
            0.8,
            0.05,
        );
        let cam = look_at_camera(
            Vector3::new(0.0, -3.0, 0.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            55.0,
            128,
            128,
        )
        .unwrap();
        let radii = view_screen_radii(&cloud, &cam).unwrap();
        assert!(radii.iter().all(|&r| r > 0.0));
        let cfg = DensifyConfig {
            max_view_radius_px: (radii[0] - 0.1) as f64,
            ..DensifyConfig::for_image_width(128)
        };
        let out = prune(&mut cloud, &cfg, Some(&radii)).unwrap();
        // Radius 0 ≤ bound keeps nothing... both exceed, so the stronger one
        // survives via the floor rule; equal opacities keep index 0.
        assert_eq!(out.kept, vec![0]);
    }

    #[test]
    fn prune_after_view_cull_keeps_unseen_gaussians() {
        let mut cloud = uniform_cloud(
            vec![Vector3::zeros(), Vector3::new(0.0, -5.0, 0.0)],
            0.8,
            0.05,
        );
        let cam = look_at_camera(
            Vector3::new(0.0, -3.0, 0.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            55.0,
            128,
            128,
        )
        .unwrap();
        let radii = view_screen_radii(&cloud, &cam).unwrap();
        assert_eq!(radii[1], 0.0);
        let out = prune(&mut cloud, &DensifyConfig::for_image_width(128), Some(&radii)).unwrap();
        assert_eq!(out.kept, vec![0, 1]);
    }

    fn brute_knn(points: &[Vector3<f32>], q: &Vector3<f32>, k: usize) -> Vec<(f32, usize)> {
        let mut all: Vec<(f32, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn kdtree_matches_brute_force_knn(
            seed in 0u64..500,
            n in 1usize..260,
            k in 1usize..10,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Snap half the points to a coarse grid so exact distance ties
            // (including coincident points) are common.
            let points: Vec<Vector3<f32>> = (0..n)
                .map(|_| {
                    let p = Vector3::new(
                        rng.random_range(-1.0f32..1.0),
                        rng.random_range(-1.0f32..1.0),
                        rng.random_range(-1.0f32..1.0),
                    );
                    if rng.random_range(0.0..1.0) < 0.5 {
                        p.map(|v| (v * 4.0).round() / 4.0)
                    } else {
                        p
                    }
                })
                .collect();
            let tree = KdTree::build(&points);
            for _ in 0..8 {
                let q = Vector3::new(
                    rng.random_range(-1.2f32..1.2),
                    rng.random_range(-1.2f32..1.2),
                    rng.random_range(-1.2f32..1.2),
                );
                prop_assert_eq!(tree.nearest(&q, k), brute_knn(&points, &q, k));
            }
        }
    }

    #[test]
    fn kdtree_query_on_a_stored_point_returns_it_first() {
        let points = vec![
            Vector3::new(0.0f32, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let tree = KdTree::build(&points);
        assert_eq!(tree.nearest(&points[1], 1), vec![(0.0, 1)]);
    }
}
