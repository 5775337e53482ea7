//! Scene-level orchestration: proposal intake through a pluggable source
//! registry, score-field initialization, in-box indexing, two-phase energy
//! minimization, instance extraction and instance-mask NMS.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::BoxProposal;
use crate::error::{Error, Result};
use crate::geometry::{build_grid, mask_iou, points_in_box, PointCloud};
use crate::io::Scene;
use crate::mining::{logit, normalize_scores, soft_seed_labels, MiningConfig, PointSubset, ScoreField, SubsetState};
use crate::optimize::{minimize, EnergyReport, ScheduleConfig};
use crate::refine::{binary_topk_labels, OccupancyStats};

/// One mined instance: its source proposal, class, foreground point set
/// (sorted global indices) and a confidence in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    pub proposal_id: usize,
    pub class_id: usize,
    pub points: Vec<usize>,
    pub confidence: f64,
}

impl InstanceCandidate {
    pub fn new(
        proposal_id: usize,
        class_id: usize,
        points: Vec<usize>,
        confidence: f64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateSubset(format!(
                "instance for proposal {proposal_id} has no points"
            )));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "instance points must be strictly ascending".into(),
            ));
        }
        if !confidence.is_finite() {
            return Err(Error::Config("instance confidence must be finite".into()));
        }
        Ok(Self {
            proposal_id,
            class_id,
            points,
            confidence,
        })
    }
}

// ── Proposal sources ────────────────────────────────────────────────────

/// A strategy producing box proposals for a scene. Implementations are
/// registered by name and selected at runtime.
pub trait ProposalSource {
    fn name(&self) -> &'static str;

    fn proposals(&self, scene: &Scene, rng: &mut dyn rand::RngCore) -> Result<Vec<BoxProposal>>;
}

/// Ground-truth boxes passed through as one-hot proposals.
#[derive(Debug, Default, Clone)]
pub struct GroundTruthSource;

impl ProposalSource for GroundTruthSource {
    fn name(&self) -> &'static str {
        "gt"
    }

    fn proposals(&self, scene: &Scene, _rng: &mut dyn rand::RngCore) -> Result<Vec<BoxProposal>> {
        scene
            .gt_boxes
            .iter()
            .map(|gt| BoxProposal::one_hot(gt.aabb, gt.class_id, scene.num_classes))
            .collect()
    }
}

/// Ground-truth boxes with per-axis scale and translation noise, standing
/// in for an imperfect detector.
#[derive(Debug, Clone)]
pub struct JitteredSource {
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift: f64,
}

impl Default for JitteredSource {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.1,
            shift: 0.05,
        }
    }
}

impl ProposalSource for JitteredSource {
    fn name(&self) -> &'static str {
        "jitter"
    }

    fn proposals(&self, scene: &Scene, rng: &mut dyn rand::RngCore) -> Result<Vec<BoxProposal>> {
        scene
            .gt_boxes
            .iter()
            .map(|gt| {
                let center = gt.aabb.center();
                let mut min = [0.0; 3];
                let mut max = [0.0; 3];
                for axis in 0..3 {
                    let half = 0.5 * (gt.aabb.max[axis] - gt.aabb.min[axis]);
                    let scaled = half * rng.random_range(self.scale_min..=self.scale_max);
                    let offset = rng.random_range(-self.shift..=self.shift);
                    min[axis] = center[axis] + offset - scaled;
                    max[axis] = center[axis] + offset + scaled;
                }
                let aabb = crate::geometry::Aabb::new(min, max)?;
                BoxProposal::one_hot(aabb, gt.class_id, scene.num_classes)
            })
            .collect()
    }
}

/// Proposals read from annotation records: either the scene's own embedded
/// proposals or an external annotation file in the same grammar.
#[derive(Debug, Default, Clone)]
pub struct FileSource {
    pub path: Option<PathBuf>,
}

impl ProposalSource for FileSource {
    fn name(&self) -> &'static str {
        "file"
    }

    fn proposals(&self, scene: &Scene, _rng: &mut dyn rand::RngCore) -> Result<Vec<BoxProposal>> {
        let proposals = match &self.path {
            Some(path) => crate::io::load_annotations(path, usize::MAX)?.proposals,
            None => scene.proposals.clone(),
        };
        if proposals.is_empty() {
            return Err(Error::Config(
                "file proposal source found no proposal records".into(),
            ));
        }
        for p in &proposals {
            if p.class_id >= scene.num_classes {
                return Err(Error::Config(format!(
                    "proposal class {} out of range for {} classes",
                    p.class_id, scene.num_classes
                )));
            }
        }
        Ok(proposals)
    }
}

/// Name-keyed registry of proposal sources.
pub struct ProposalRegistry {
    entries: BTreeMap<&'static str, Box<dyn ProposalSource>>,
}

impl ProposalRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with the built-in sources: `gt`, `jitter`, `file`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(GroundTruthSource));
        reg.register(Box::new(JitteredSource::default()));
        reg.register(Box::new(FileSource::default()));
        reg
    }

    /// Insert or replace a source under its own name.
    pub fn register(&mut self, source: Box<dyn ProposalSource>) {
        self.entries.insert(source.name(), source);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ProposalSource> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "proposal source",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

// ── Field initialization ────────────────────────────────────────────────

/// Box-supervision foreground prior applied after initialization.
///
/// A tight proposal box implies the object inside it spans the box. Each
/// subset's colors are split into two clusters; when the clusters are
/// clearly separated, the cluster whose points span the smaller volume is
/// treated as background filler and its in-box score is lowered so that
/// seed growth starts from the spanning cluster. Disable for score fields
/// that already carry semantics.
#[derive(Debug, Clone)]
pub struct ForegroundPriorConfig {
    pub enabled: bool,
    /// In-box score assigned to the filler cluster.
    pub low_score: f64,
    /// Minimum squared color distance between cluster means for a split.
    pub min_contrast: f64,
    pub kmeans_iters: usize,
}

impl Default for ForegroundPriorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            low_score: 0.3,
            min_contrast: 0.05,
            kmeans_iters: 16,
        }
    }
}

/// End-to-end mining configuration.
#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub mining: MiningConfig,
    pub schedule: ScheduleConfig,
    pub init: InitConfig,
    pub prior: ForegroundPriorConfig,
    pub nms: NmsConfig,
}

/// Initial in-box / out-of-box scores.
#[derive(Debug, Clone)]
pub struct InitConfig {
    pub inside_score: f64,
    pub outside_score: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            inside_score: 0.7,
            outside_score: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmsConfig {
    pub iou_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.25,
        }
    }
}

/// Initialize logits so the score is `inside_score` on a proposal's class
/// channel for points inside its box and `outside_score` everywhere else;
/// overlapping boxes take the elementwise maximum score.
pub fn initialize_field(
    cloud: &PointCloud,
    proposals: &[BoxProposal],
    num_classes: usize,
    init: &InitConfig,
) -> Result<ScoreField> {
    for bound in [init.inside_score, init.outside_score] {
        if !(bound > 0.0 && bound < 1.0) {
            return Err(Error::Config(
                "initial scores must lie strictly inside (0,1)".into(),
            ));
        }
    }
    let mut field = ScoreField::constant(cloud.len(), num_classes, logit(init.outside_score))?;
    let inside_logit = logit(init.inside_score);
    for p in proposals {
        if p.class_id >= num_classes {
            return Err(Error::Config(format!(
                "proposal class {} out of range for {num_classes} classes",
                p.class_id
            )));
        }
        for idx in points_in_box(cloud, &p.aabb) {
            if field.logit_at(idx, p.class_id) < inside_logit {
                field.set_logit(idx, p.class_id, inside_logit);
            }
        }
    }
    Ok(field)
}

/// Two-cluster color split of one subset: deterministic farthest-point
/// seeding plus a few mean-update rounds. Returns per-point cluster ids
/// and the squared distance between the final cluster means.
fn color_clusters(cloud: &PointCloud, subset: &PointSubset, iters: usize) -> (Vec<u8>, f64) {
    let n = subset.len();
    let color = |j: usize| cloud.colors[subset.global(j)];
    let mut mean = [0.0; 3];
    for j in 0..n {
        let c = color(j);
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let far = |from: [f64; 3]| -> usize {
        let mut best = 0;
        let mut best_d = -1.0;
        for j in 0..n {
            let d = crate::linalg::dist_sq(color(j), from);
            if d > best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };
    let seed_a = far(mean);
    let seed_b = far(color(seed_a));
    let mut centers = [color(seed_a), color(seed_b)];
    let mut assign = vec![0u8; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (j, slot) in assign.iter_mut().enumerate() {
            let c = color(j);
            let da = crate::linalg::dist_sq(c, centers[0]);
            let db = crate::linalg::dist_sq(c, centers[1]);
            let next = u8::from(db < da);
            if next != *slot {
                *slot = next;
                changed = true;
            }
        }
        let mut sums = [[0.0; 3]; 2];
        let mut counts = [0usize; 2];
        for (j, &slot) in assign.iter().enumerate() {
            let c = color(j);
            for (s, v) in sums[slot as usize].iter_mut().zip(c) {
                *s += v;
            }
            counts[slot as usize] += 1;
        }
        for k in 0..2 {
            if counts[k] > 0 {
                centers[k] = [
                    sums[k][0] / counts[k] as f64,
                    sums[k][1] / counts[k] as f64,
                    sums[k][2] / counts[k] as f64,
                ];
            }
        }
        if !changed {
            break;
        }
    }
    (assign, crate::linalg::dist_sq(centers[0], centers[1]))
}

/// Apply the foreground prior to one subset: when its colors split into
/// two contrasted clusters, lower the class-channel score of the cluster
/// spanning the smaller volume.
pub fn apply_foreground_prior(
    field: &mut ScoreField,
    cloud: &PointCloud,
    subset: &PointSubset,
    init: &InitConfig,
    prior: &ForegroundPriorConfig,
) {
    if subset.len() < 4 {
        return;
    }
    let (assign, contrast) = color_clusters(cloud, subset, prior.kmeans_iters);
    if contrast < prior.min_contrast {
        return;
    }
    let span = |cluster: u8| -> Option<f64> {
        let points = (0..subset.len())
            .filter(|&j| assign[j] == cluster)
            .map(|j| cloud.positions[subset.global(j)]);
        crate::geometry::Aabb::tight(points).ok().map(|b| {
            let d = crate::linalg::sub(b.max, b.min);
            d[0] * d[1] * d[2]
        })
    };
    let (Some(vol0), Some(vol1)) = (span(0), span(1)) else {
        return;
    };
    let counts = assign.iter().fold([0usize; 2], |mut acc, &a| {
        acc[a as usize] += 1;
        acc
    });
    if counts[0] == 0 || counts[1] == 0 {
        return;
    }
    // The cluster spanning the box is the object; break volume ties by
    // point count, then keep cluster 0.
    let filler: u8 = if vol0 > vol1 {
        1
    } else if vol1 > vol0 {
        0
    } else if counts[0] >= counts[1] {
        1
    } else {
        0
    };
    let low = logit(prior.low_score.min(init.inside_score));
    let inside = logit(init.inside_score);
    for (j, &cluster) in assign.iter().enumerate() {
        if cluster == filler {
            let g = subset.global(j);
            // Respect the elementwise-max rule across overlapping boxes.
            if field.logit_at(g, subset.class_id) <= inside {
                field.set_logit(g, subset.class_id, low);
            }
        }
    }
}

// ── Extraction and NMS ──────────────────────────────────────────────────

/// Extract the final instance of one subset: the binary top-k foreground
/// under the class occupancy ratio (falling back to the soft seed labels
/// when the class has no statistics), with confidence
/// `mean(S') x proposal class probability`.
pub fn extract_instance(
    field: &ScoreField,
    subset: &PointSubset,
    proposal: &BoxProposal,
    stats: &OccupancyStats,
    cfg: &MiningConfig,
) -> Result<InstanceCandidate> {
    let norm = normalize_scores(field, subset)?;
    let labels = match binary_topk_labels(&norm.values, subset, stats) {
        Some(binary) => binary,
        None => soft_seed_labels(&norm.values, field, subset, cfg),
    };
    let mut points = Vec::new();
    let mut sprime_sum = 0.0;
    for j in 0..subset.len() {
        if labels.discriminative[j] {
            points.push(subset.global(j));
            sprime_sum += norm.values[j];
        }
    }
    if points.is_empty() {
        return Err(Error::DegenerateSubset(format!(
            "proposal {} produced no foreground points",
            subset.proposal_id
        )));
    }
    let mean_sprime = sprime_sum / points.len() as f64;
    let class_prob = proposal.class_probs.get(subset.class_id).copied().unwrap_or(0.0);
    InstanceCandidate::new(
        subset.proposal_id,
        subset.class_id,
        points,
        mean_sprime * class_prob,
    )
}

/// Greedy instance-mask NMS: sort by confidence descending (ties by lower
/// proposal id), keep a candidate iff its mask IoU with every kept
/// candidate of the same class stays below the threshold.
pub fn nms(candidates: &[InstanceCandidate], iou_threshold: f64) -> Vec<InstanceCandidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&x, &y| {
        candidates[y]
            .confidence
            .partial_cmp(&candidates[x].confidence)
            .expect("finite confidences")
            .then(candidates[x].proposal_id.cmp(&candidates[y].proposal_id))
    });
    let mut kept: Vec<InstanceCandidate> = Vec::new();
    for idx in order {
        let cand = &candidates[idx];
        let duplicate = kept.iter().any(|k| {
            k.class_id == cand.class_id
                && mask_iou(&k.points, &cand.points)
                    .expect("instance masks are nonempty")
                    >= iou_threshold
        });
        if !duplicate {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Everything `mine_scene` produces.
#[derive(Debug, Clone)]
pub struct MineOutcome {
    pub instances: Vec<InstanceCandidate>,
    /// The proposals actually used, index-aligned with proposal ids.
    pub proposals: Vec<BoxProposal>,
    pub report: EnergyReport,
    pub stats: OccupancyStats,
    pub warnings: Vec<String>,
}

/// Full mining flow for one scene: proposals, in-box indexing, field
/// initialization (plus foreground prior), two-phase descent, extraction
/// and NMS. Deterministic for a fixed seed.
pub fn mine_scene(
    scene: &Scene,
    source: &dyn ProposalSource,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MineOutcome> {
    cfg.mining.validate()?;
    cfg.schedule.validate()?;
    let nms_ok = cfg.nms.iou_threshold > 0.0 && cfg.nms.iou_threshold < 1.0;
    if !nms_ok {
        return Err(Error::Config("NMS threshold must be in (0,1)".into()));
    }
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proposals = source.proposals(scene, &mut rng)?;
    if proposals.is_empty() {
        warnings.push("proposal source produced no proposals".into());
        return Ok(MineOutcome {
            instances: Vec::new(),
            proposals,
            report: EnergyReport::default(),
            stats: OccupancyStats::default(),
            warnings,
        });
    }

    let mut subsets = Vec::new();
    for (pid, p) in proposals.iter().enumerate() {
        let indices = points_in_box(&scene.cloud, &p.aabb);
        if indices.is_empty() {
            warnings.push(format!("proposal {pid} contains no points; skipped"));
            continue;
        }
        subsets.push(PointSubset::new(pid, p.class_id, indices, scene.cloud.len())?);
    }
    if subsets.is_empty() {
        warnings.push("no proposal contained any points".into());
        return Ok(MineOutcome {
            instances: Vec::new(),
            proposals,
            report: EnergyReport::default(),
            stats: OccupancyStats::default(),
            warnings,
        });
    }

    let mut field = initialize_field(&scene.cloud, &proposals, scene.num_classes, &cfg.init)?;
    if cfg.prior.enabled {
        for subset in &subsets {
            apply_foreground_prior(&mut field, &scene.cloud, subset, &cfg.init, &cfg.prior);
        }
    }

    let grid = build_grid(&scene.cloud, cfg.mining.radius)?;
    let mut states = Vec::with_capacity(subsets.len());
    for subset in subsets {
        states.push(SubsetState::prepare(
            &scene.cloud,
            &grid,
            &field,
            subset,
            &cfg.mining,
        )?);
    }

    let (report, stats) = minimize(&mut field, &mut states, &cfg.mining, &cfg.schedule)?;

    let mut candidates = Vec::with_capacity(states.len());
    for st in &states {
        match extract_instance(
            &field,
            &st.subset,
            &proposals[st.subset.proposal_id],
            &stats,
            &cfg.mining,
        ) {
            Ok(c) => candidates.push(c),
            Err(e) => warnings.push(format!(
                "proposal {}: candidate skipped: {e}",
                st.subset.proposal_id
            )),
        }
    }
    let instances = nms(&candidates, cfg.nms.iou_threshold);
    Ok(MineOutcome {
        instances,
        proposals,
        report,
        stats,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::io::GtBox;

    fn up() -> [f64; 3] {
        [0.0, 0.0, 1.0]
    }

    fn simple_cloud() -> PointCloud {
        // Point 0 outside all boxes, points 1..4 inside the unit box.
        let positions = vec![
            [5.0, 5.0, 5.0],
            [0.2, 0.2, 0.2],
            [0.5, 0.5, 0.5],
            [0.8, 0.8, 0.8],
        ];
        PointCloud::new(positions, vec![[0.5; 3]; 4], vec![up(); 4]).unwrap()
    }

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn initialize_inside_outside_and_max_rule() {
        let cloud = simple_cloud();
        let p = BoxProposal::one_hot(unit_box(), 2, 4).unwrap();
        let init = InitConfig::default();
        let field = initialize_field(&cloud, std::slice::from_ref(&p), 4, &init).unwrap();
        for c in 0..4 {
            assert!((field.score(0, c) - 0.1).abs() < 1e-12);
        }
        assert!((field.score(1, 2) - 0.7).abs() < 1e-12);
        assert!((field.score(1, 0) - 0.1).abs() < 1e-12);

        // Same-class overlapping boxes keep the max.
        let field2 = initialize_field(&cloud, &[p.clone(), p], 4, &init).unwrap();
        assert!((field2.score(2, 2) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn foreground_prior_lowers_compact_cluster() {
        // 12 spanning red points and 4 buried gray points in one box.
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        for i in 0..12 {
            let t = i as f64 / 11.0;
            positions.push([t, t, t]);
            colors.push([0.9, 0.1, 0.1]);
        }
        for i in 0..4 {
            positions.push([0.45 + 0.02 * i as f64, 0.5, 0.5]);
            colors.push([0.5, 0.5, 0.5]);
        }
        let n = positions.len();
        let cloud = PointCloud::new(positions, colors, vec![up(); n]).unwrap();
        let subset = PointSubset::new(0, 0, (0..n).collect(), n).unwrap();
        let init = InitConfig::default();
        let prior = ForegroundPriorConfig::default();
        let mut field = ScoreField::constant(n, 2, logit(init.inside_score)).unwrap();
        apply_foreground_prior(&mut field, &cloud, &subset, &init, &prior);
        for i in 0..12 {
            assert!((field.score(i, 0) - 0.7).abs() < 1e-12, "point {i} lowered");
        }
        for i in 12..16 {
            assert!((field.score(i, 0) - prior.low_score).abs() < 1e-12, "point {i} kept");
        }

        // Homogeneous colors: no split, nothing lowered.
        let cloud2 = PointCloud::new(
            (0..8).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect(),
            vec![[0.3, 0.6, 0.2]; 8],
            vec![up(); 8],
        )
        .unwrap();
        let subset2 = PointSubset::new(0, 0, (0..8).collect(), 8).unwrap();
        let mut field2 = ScoreField::constant(8, 2, logit(init.inside_score)).unwrap();
        apply_foreground_prior(&mut field2, &cloud2, &subset2, &init, &prior);
        for i in 0..8 {
            assert!((field2.score(i, 0) - 0.7).abs() < 1e-12);
        }
    }

    fn stats_for(class: usize, ratio: f64) -> OccupancyStats {
        let mut stats = OccupancyStats::default();
        stats.per_class.insert(
            class,
            crate::refine::ClassOccupancy {
                instance_count: 1,
                mean_ratio: ratio,
            },
        );
        stats
    }

    #[test]
    fn extract_full_subset_with_unit_confidence() {
        let p = BoxProposal::one_hot(unit_box(), 1, 2).unwrap();
        let subset = PointSubset::new(0, 1, vec![1, 2, 3], 4).unwrap();
        let mut field = ScoreField::constant(4, 2, logit(0.1)).unwrap();
        for idx in [1, 2, 3] {
            field.set_logit(idx, 1, logit(0.9));
        }
        let inst =
            extract_instance(&field, &subset, &p, &stats_for(1, 1.0), &MiningConfig::default())
                .unwrap();
        assert_eq!(inst.points, vec![1, 2, 3]);
        assert!((inst.confidence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extract_respects_topk_and_zero_class_prob() {
        let subset = PointSubset::new(0, 1, vec![0, 1, 2, 3], 4).unwrap();
        let mut field = ScoreField::constant(4, 2, logit(0.1)).unwrap();
        let scores = [0.9, 0.8, 0.2, 0.15];
        for (i, s) in scores.iter().enumerate() {
            field.set_logit(i, 1, logit(*s));
        }
        let p = BoxProposal::one_hot(unit_box(), 1, 2).unwrap();
        let inst =
            extract_instance(&field, &subset, &p, &stats_for(1, 0.5), &MiningConfig::default())
                .unwrap();
        assert_eq!(inst.points, vec![0, 1]);

        // Zero class probability ranks the candidate last.
        let p0 = BoxProposal::with_class_id(unit_box(), vec![1.0, 0.0], 1).unwrap();
        let inst0 =
            extract_instance(&field, &subset, &p0, &stats_for(1, 0.5), &MiningConfig::default())
                .unwrap();
        assert_eq!(inst0.confidence, 0.0);
    }

    fn cand(id: usize, class: usize, points: Vec<usize>, conf: f64) -> InstanceCandidate {
        InstanceCandidate::new(id, class, points, conf).unwrap()
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let a = cand(0, 1, vec![1, 2, 3], 0.9);
        let b = cand(1, 1, vec![1, 2, 3], 0.5);
        let kept = nms(&[b, a.clone()], 0.25);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_keeps_disjoint_and_cross_class() {
        let a = cand(0, 1, vec![1, 2], 0.9);
        let b = cand(1, 1, vec![5, 6], 0.5);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.25).len(), 2);

        // Identical masks of different classes both survive.
        let c = cand(2, 0, vec![1, 2], 0.4);
        assert_eq!(nms(&[a, c], 0.25).len(), 2);
    }

    #[test]
    fn nms_greedy_chain() {
        // IoU(a,b) = 0.5, IoU(b,c) = 0.5, IoU(a,c) = 0.
        let a = cand(0, 1, vec![0, 1, 2, 3], 0.9);
        let b = cand(1, 1, (0..8).collect(), 0.8);
        let c = cand(2, 1, vec![4, 5, 6, 7], 0.7);
        let kept = nms(&[a.clone(), b, c.clone()], 0.25);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_idempotent() {
        let cands = vec![
            cand(0, 1, vec![0, 1, 2, 3], 0.9),
            cand(1, 1, vec![2, 3, 4, 5], 0.8),
            cand(2, 0, vec![0, 1], 0.7),
            cand(3, 1, vec![10, 11], 0.6),
        ];
        let once = nms(&cands, 0.25);
        let twice = nms(&once, 0.25);
        assert_eq!(once, twice);
    }

    fn tiny_scene() -> Scene {
        // A dense blob inside the unit box plus spread background.
        let mut positions = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                positions.push([0.1 + 0.15 * i as f64, 0.1 + 0.15 * j as f64, 0.5]);
            }
        }
        positions.push([3.0, 3.0, 3.0]);
        positions.push([-3.0, -3.0, 1.0]);
        let n = positions.len();
        let mask: Vec<usize> = (0..36).collect();
        let cloud = PointCloud::new(positions, vec![[0.2, 0.3, 0.8]; n], vec![up(); n]).unwrap();
        Scene {
            cloud,
            num_classes: 2,
            gt_boxes: vec![GtBox {
                instance_id: 0,
                class_id: 1,
                aabb: unit_box(),
            }],
            gt_masks: vec![crate::io::GtMask {
                instance_id: 0,
                class_id: 1,
                points: mask,
            }],
            proposals: vec![],
        }
    }

    fn fast_cfg() -> PipelineConfig {
        PipelineConfig {
            schedule: ScheduleConfig {
                phase1_iters: 80,
                phase2_iters: 30,
                decay_points: vec![],
                ..ScheduleConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn mine_scene_empty_proposals() {
        let scene = Scene {
            gt_boxes: vec![],
            gt_masks: vec![],
            ..tiny_scene()
        };
        let out = mine_scene(&scene, &GroundTruthSource, &fast_cfg(), 1).unwrap();
        assert!(out.instances.is_empty());
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn mine_scene_single_instance_recovers_mask() {
        let scene = tiny_scene();
        let out = mine_scene(&scene, &GroundTruthSource, &fast_cfg(), 1).unwrap();
        assert_eq!(out.instances.len(), 1);
        let inst = &out.instances[0];
        let gt: Vec<usize> = (0..36).collect();
        let iou = mask_iou(&inst.points, &gt).unwrap();
        assert!(iou >= 0.9, "IoU = {iou}");
        // Every mined point lies inside the source box (closed faces).
        let source_box = out.proposals[inst.proposal_id].aabb;
        for &p in &inst.points {
            assert!(source_box.contains(scene.cloud.positions[p]));
        }
    }

    #[test]
    fn mine_scene_duplicate_proposals_collapse() {
        let mut scene = tiny_scene();
        scene.gt_boxes.push(scene.gt_boxes[0].clone());
        let out = mine_scene(&scene, &GroundTruthSource, &fast_cfg(), 1).unwrap();
        assert_eq!(out.instances.len(), 1);
    }

    #[test]
    fn mine_scene_is_deterministic() {
        let scene = tiny_scene();
        let a = mine_scene(&scene, &GroundTruthSource, &fast_cfg(), 7).unwrap();
        let b = mine_scene(&scene, &GroundTruthSource, &fast_cfg(), 7).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.report.to_csv(), b.report.to_csv());
    }

    #[test]
    fn registry_lookup() {
        let reg = ProposalRegistry::with_builtins();
        assert_eq!(reg.names(), vec!["file", "gt", "jitter"]);
        assert!(reg.get("gt").is_ok());
        assert!(matches!(
            reg.get("detector"),
            Err(Error::UnknownStrategy { .. })
        ));
    }
}
