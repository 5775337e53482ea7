//! Synthetic desk-scale scenes with per-class designed occupancy ratios.
//!
//! Each instance is built from a shape recipe that splits its in-box
//! points into a foreground set spanning the box and a filler set buried
//! inside it, so the fraction of in-box points belonging to the instance
//! is controlled exactly. Recipes live behind a name-keyed registry and
//! are selected per class via configuration.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::BoxProposal;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, PointCloud};
use crate::io::{GtBox, GtMask, Scene};
use crate::linalg::{self, Vec3};

/// Points sampled for one instance: foreground spans the box, filler hides
/// strictly inside the foreground's tight box.
#[derive(Debug, Clone)]
pub struct SampledShape {
    pub foreground: Vec<Vec3>,
    pub filler: Vec<Vec3>,
}

/// A named instance-shape generator.
pub trait ShapeRecipe: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the target occupancy is realizable for this shape.
    fn supports(&self, occupancy: f64) -> bool;

    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        aabb: &Aabb,
        n_foreground: usize,
        n_filler: usize,
    ) -> Result<SampledShape>;
}

fn uniform_in(rng: &mut ChaCha8Rng, aabb: &Aabb) -> Vec3 {
    [
        rng.random_range(aabb.min[0]..=aabb.max[0]),
        rng.random_range(aabb.min[1]..=aabb.max[1]),
        rng.random_range(aabb.min[2]..=aabb.max[2]),
    ]
}

/// Inset margin keeping filler away from the tight-box faces (and out of
/// the neighborhood balls of surface points).
const FILL_INSET: f64 = 0.05;

/// Solid instance filling its whole box; occupancy is always 1.
#[derive(Debug, Default)]
pub struct FullBoxShape;

impl ShapeRecipe for FullBoxShape {
    fn name(&self) -> &'static str {
        "full-box"
    }

    fn supports(&self, occupancy: f64) -> bool {
        (occupancy - 1.0).abs() < 1e-9
    }

    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        aabb: &Aabb,
        n_foreground: usize,
        n_filler: usize,
    ) -> Result<SampledShape> {
        if n_filler > 0 {
            return Err(Error::Generation(
                "full-box shape cannot host filler points".into(),
            ));
        }
        let foreground = (0..n_foreground).map(|_| uniform_in(rng, aabb)).collect();
        Ok(SampledShape {
            foreground,
            filler: Vec::new(),
        })
    }
}

/// Hollow instance: foreground in the outer band between the box surface
/// and the inner half-box, filler buried in the hollow core.
#[derive(Debug, Default)]
pub struct ShellShape;

impl ShapeRecipe for ShellShape {
    fn name(&self) -> &'static str {
        "shell"
    }

    fn supports(&self, occupancy: f64) -> bool {
        occupancy > 0.0 && occupancy <= 1.0
    }

    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        aabb: &Aabb,
        n_foreground: usize,
        n_filler: usize,
    ) -> Result<SampledShape> {
        let center = aabb.center();
        let half = linalg::scale(linalg::sub(aabb.max, aabb.min), 0.5);
        let core = Aabb::new(
            linalg::sub(center, linalg::scale(half, 0.5)),
            linalg::add(center, linalg::scale(half, 0.5)),
        )?;
        let mut foreground = Vec::with_capacity(n_foreground);
        while foreground.len() < n_foreground {
            let p = uniform_in(rng, aabb);
            if !core.contains(p) {
                foreground.push(p);
            }
        }
        let filler = sample_filler(rng, &foreground, &core, n_filler)?;
        Ok(SampledShape { foreground, filler })
    }
}

/// Instance occupying the box minus its upper corner octant; filler hides
/// in the notch.
#[derive(Debug, Default)]
pub struct CornerNotchShape;

impl ShapeRecipe for CornerNotchShape {
    fn name(&self) -> &'static str {
        "l-shape"
    }

    fn supports(&self, occupancy: f64) -> bool {
        occupancy > 0.0 && occupancy <= 1.0
    }

    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        aabb: &Aabb,
        n_foreground: usize,
        n_filler: usize,
    ) -> Result<SampledShape> {
        let notch = Aabb::new(aabb.center(), aabb.max)?;
        let mut foreground = Vec::with_capacity(n_foreground);
        while foreground.len() < n_foreground {
            let p = uniform_in(rng, aabb);
            if !notch.contains(p) {
                foreground.push(p);
            }
        }
        let filler = sample_filler(rng, &foreground, &notch, n_filler)?;
        Ok(SampledShape { foreground, filler })
    }
}

/// Uniform filler inside `region` shrunk by the inset and clipped to the
/// foreground's tight box (so every filler point lands inside the final
/// ground-truth box, away from foreground surfaces).
fn sample_filler(
    rng: &mut ChaCha8Rng,
    foreground: &[Vec3],
    region: &Aabb,
    n_filler: usize,
) -> Result<Vec<Vec3>> {
    if n_filler == 0 {
        return Ok(Vec::new());
    }
    let tight = Aabb::tight(foreground.iter().copied())?;
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for axis in 0..3 {
        min[axis] = (region.min[axis] + FILL_INSET).max(tight.min[axis] + FILL_INSET);
        max[axis] = (region.max[axis] - FILL_INSET).min(tight.max[axis] - FILL_INSET);
        if min[axis] >= max[axis] {
            return Err(Error::Generation(format!(
                "filler region collapsed on axis {axis}; box too small for the shape"
            )));
        }
    }
    let fill_box = Aabb::new(min, max)?;
    Ok((0..n_filler).map(|_| uniform_in(rng, &fill_box)).collect())
}

/// Name-keyed registry of shape recipes.
pub struct ShapeRegistry {
    entries: BTreeMap<&'static str, Box<dyn ShapeRecipe>>,
}

impl ShapeRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with the built-in shapes: `full-box`, `shell`, `l-shape`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(FullBoxShape));
        reg.register(Box::new(ShellShape));
        reg.register(Box::new(CornerNotchShape));
        reg
    }

    pub fn register(&mut self, recipe: Box<dyn ShapeRecipe>) {
        self.entries.insert(recipe.name(), recipe);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ShapeRecipe> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "shape recipe",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Shape and target occupancy of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub shape: String,
    pub occupancy: f64,
}

impl ClassRecipe {
    pub fn new(shape: impl Into<String>, occupancy: f64) -> Self {
        Self {
            shape: shape.into(),
            occupancy,
        }
    }

    /// Parse `shape:occupancy`, e.g. `shell:0.54`.
    pub fn parse(s: &str) -> Result<Self> {
        let (shape, occ) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("class recipe '{s}' must be shape:occupancy")))?;
        let occupancy: f64 = occ
            .parse()
            .map_err(|_| Error::Config(format!("bad occupancy '{occ}'")))?;
        Ok(Self::new(shape, occupancy))
    }
}

/// Scene-generation configuration.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total point budget per scene (instances plus background).
    pub points: usize,
    pub classes: Vec<ClassRecipe>,
    pub instances_min: usize,
    pub instances_max: usize,
    pub instance_points_min: usize,
    pub instance_points_max: usize,
    pub box_size_min: f64,
    pub box_size_max: f64,
    /// Scene half-extent in x/y, meters.
    pub extent: f64,
    pub color_noise: f64,
    pub normal_noise: f64,
    /// Minimum color distance between an instance and the background.
    pub color_margin: f64,
    pub background_color: Vec3,
    /// Embed jittered proposals in the annotation file.
    pub emit_proposals: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 10_000,
            classes: vec![
                ClassRecipe::new("full-box", 1.0),
                ClassRecipe::new("shell", 0.84),
                ClassRecipe::new("l-shape", 0.7),
                ClassRecipe::new("shell", 0.54),
            ],
            instances_min: 4,
            instances_max: 8,
            instance_points_min: 500,
            instance_points_max: 900,
            box_size_min: 0.4,
            box_size_max: 0.6,
            extent: 1.6,
            color_noise: 0.02,
            normal_noise: 0.05,
            color_margin: 0.55,
            background_color: [0.52, 0.52, 0.52],
            emit_proposals: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, registry: &ShapeRegistry) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class recipe required".into()));
        }
        for (class_id, recipe) in self.classes.iter().enumerate() {
            let in_range = recipe.occupancy > 0.0 && recipe.occupancy <= 1.0;
            if !in_range {
                return Err(Error::Config(format!(
                    "class {class_id}: occupancy must be in (0,1], got {}",
                    recipe.occupancy
                )));
            }
            let shape = registry.get(&recipe.shape)?;
            if !shape.supports(recipe.occupancy) {
                return Err(Error::Generation(format!(
                    "class {class_id}: shape '{}' cannot realize occupancy {}",
                    recipe.shape, recipe.occupancy
                )));
            }
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return Err(Error::Config("bad instance count range".into()));
        }
        if self.instance_points_min < 50 || self.instance_points_min > self.instance_points_max {
            return Err(Error::Config("bad instance point range".into()));
        }
        let boxes_ok = self.box_size_min > 0.2 && self.box_size_min <= self.box_size_max;
        if !boxes_ok {
            return Err(Error::Config(
                "box sizes must be at least 0.2 m and ordered".into(),
            ));
        }
        if self.extent.is_nan() || self.extent <= self.box_size_max {
            return Err(Error::Config("extent must exceed the box size".into()));
        }
        let margin_ok = self.color_margin > 0.0 && self.color_margin < 0.8;
        if !margin_ok {
            return Err(Error::Config("color margin must be in (0, 0.8)".into()));
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, scene_index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(scene_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn quantize(v: Vec3) -> Vec3 {
    [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64]
}

fn noisy_color(rng: &mut ChaCha8Rng, base: Vec3, noise: f64) -> Vec3 {
    let mut c = base;
    for v in &mut c {
        if noise > 0.0 {
            *v += rng.random_range(-noise..=noise);
        }
        *v = v.clamp(0.0, 1.0);
    }
    c
}

fn noisy_normal(rng: &mut ChaCha8Rng, base: Vec3, noise: f64) -> Vec3 {
    let mut n = base;
    for v in &mut n {
        if noise > 0.0 {
            *v += rng.random_range(-noise..=noise);
        }
    }
    linalg::normalize(n).unwrap_or([0.0, 0.0, 1.0])
}

struct InstanceDraft {
    class_id: usize,
    foreground: Vec<Vec3>,
    filler: Vec<Vec3>,
    color: Vec3,
    center: Vec3,
}

/// Generate one scene. Deterministic in `(cfg.seed, scene_index)`; the
/// realized in-box foreground fraction matches each class target within
/// rounding, ground-truth boxes are tight over the foreground, and
/// background points never enter an instance box.
pub fn generate_scene(
    cfg: &SynthConfig,
    registry: &ShapeRegistry,
    scene_index: usize,
) -> Result<Scene> {
    cfg.validate(registry)?;
    let mut rng = scene_rng(cfg.seed, scene_index);
    let num_classes = cfg.classes.len();
    let n_instances = rng.random_range(cfg.instances_min..=cfg.instances_max);

    // Place non-overlapping boxes above the floor plane.
    let mut boxes: Vec<Aabb> = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let mut placed = false;
        for _attempt in 0..300 {
            let size = [
                rng.random_range(cfg.box_size_min..=cfg.box_size_max),
                rng.random_range(cfg.box_size_min..=cfg.box_size_max),
                rng.random_range(cfg.box_size_min..=cfg.box_size_max),
            ];
            let room = cfg.extent - 0.5 * size[0].max(size[1]);
            let center = [
                rng.random_range(-room..=room),
                rng.random_range(-room..=room),
                rng.random_range(0.5 * size[2] + 0.05..=0.5 * size[2] + 0.45),
            ];
            let aabb = Aabb::new(
                linalg::sub(center, linalg::scale(size, 0.5)),
                linalg::add(center, linalg::scale(size, 0.5)),
            )?;
            let clear = boxes
                .iter()
                .all(|b| b.inflated(0.08).intersection_volume(&aabb) == 0.0);
            if clear {
                boxes.push(aabb);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place instance {i} without overlap; reduce count or box size"
            )));
        }
    }

    // Sample instance points per the class recipes.
    let mut drafts: Vec<InstanceDraft> = Vec::with_capacity(n_instances);
    for (i, aabb) in boxes.iter().enumerate() {
        let class_id = i % num_classes;
        let recipe = &cfg.classes[class_id];
        let shape = registry.get(&recipe.shape)?;
        let total = rng.random_range(cfg.instance_points_min..=cfg.instance_points_max);
        let n_fore = ((recipe.occupancy * total as f64).round() as usize).clamp(1, total);
        let n_fill = total - n_fore;
        let sampled = shape.sample(&mut rng, aabb, n_fore, n_fill)?;
        let color = sample_instance_color(&mut rng, cfg)?;
        drafts.push(InstanceDraft {
            class_id,
            foreground: sampled.foreground,
            filler: sampled.filler,
            color,
            center: aabb.center(),
        });
    }

    // Assemble channels: instances first, background after.
    let mut positions: Vec<Vec3> = Vec::with_capacity(cfg.points);
    let mut colors: Vec<Vec3> = Vec::with_capacity(cfg.points);
    let mut normals: Vec<Vec3> = Vec::with_capacity(cfg.points);
    let mut fore_ranges: Vec<(usize, usize)> = Vec::with_capacity(n_instances);
    for d in &drafts {
        let start = positions.len();
        for &p in &d.foreground {
            positions.push(quantize(p));
            colors.push(quantize(noisy_color(&mut rng, d.color, cfg.color_noise)));
            let radial = linalg::normalize(linalg::sub(p, d.center)).unwrap_or([0.0, 0.0, 1.0]);
            normals.push(quantize(noisy_normal(&mut rng, radial, cfg.normal_noise)));
        }
        fore_ranges.push((start, positions.len()));
        for &p in &d.filler {
            positions.push(quantize(p));
            colors.push(quantize(noisy_color(&mut rng, cfg.background_color, cfg.color_noise)));
            normals.push(quantize(noisy_normal(&mut rng, [0.0, 0.0, 1.0], cfg.normal_noise)));
        }
    }

    // Tight ground-truth boxes over the quantized foreground.
    let gt_boxes: Vec<GtBox> = drafts
        .iter()
        .zip(&fore_ranges)
        .enumerate()
        .map(|(instance_id, (d, &(start, end)))| {
            let aabb = Aabb::tight(positions[start..end].iter().copied())
                .expect("foreground is nonempty");
            Ok(GtBox {
                instance_id,
                class_id: d.class_id,
                aabb,
            })
        })
        .collect::<Result<_>>()?;

    // Background: floor plane plus volume clutter, kept out of every box.
    let n_background = cfg.points.saturating_sub(positions.len());
    let keepout: Vec<Aabb> = gt_boxes.iter().map(|b| b.aabb.inflated(0.02)).collect();
    for i in 0..n_background {
        let mut placed = false;
        for _attempt in 0..1000 {
            let p = if i % 5 < 3 {
                // Floor point.
                [
                    rng.random_range(-cfg.extent..=cfg.extent),
                    rng.random_range(-cfg.extent..=cfg.extent),
                    rng.random_range(0.0..=0.01),
                ]
            } else {
                [
                    rng.random_range(-cfg.extent..=cfg.extent),
                    rng.random_range(-cfg.extent..=cfg.extent),
                    rng.random_range(0.0..=1.1),
                ]
            };
            if keepout.iter().all(|b| !b.contains(p)) {
                positions.push(quantize(p));
                colors.push(quantize(noisy_color(
                    &mut rng,
                    cfg.background_color,
                    cfg.color_noise,
                )));
                normals.push(quantize(noisy_normal(&mut rng, [0.0, 0.0, 1.0], cfg.normal_noise)));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(
                "background sampling starved by instance keepout regions".into(),
            ));
        }
    }

    // Shuffle the global point order so indices carry no layout hints.
    let n = positions.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut inverse = vec![0usize; n];
    for (new_idx, &old_idx) in perm.iter().enumerate() {
        inverse[old_idx] = new_idx;
    }
    let reorder = |data: &[Vec3]| -> Vec<Vec3> { perm.iter().map(|&old| data[old]).collect() };
    let cloud = PointCloud::new(reorder(&positions), reorder(&colors), reorder(&normals))?;

    let gt_masks: Vec<GtMask> = fore_ranges
        .iter()
        .enumerate()
        .map(|(instance_id, &(start, end))| {
            let mut points: Vec<usize> = (start..end).map(|old| inverse[old]).collect();
            points.sort_unstable();
            GtMask {
                instance_id,
                class_id: drafts[instance_id].class_id,
                points,
            }
        })
        .collect();

    let proposals = if cfg.emit_proposals {
        let jitter = crate::pipeline::JitteredSource::default();
        gt_boxes
            .iter()
            .map(|gt| {
                let center = gt.aabb.center();
                let mut min = [0.0; 3];
                let mut max = [0.0; 3];
                for axis in 0..3 {
                    let half = 0.5 * (gt.aabb.max[axis] - gt.aabb.min[axis]);
                    let scaled = half * rng.random_range(jitter.scale_min..=jitter.scale_max);
                    let offset = rng.random_range(-jitter.shift..=jitter.shift);
                    min[axis] = center[axis] + offset - scaled;
                    max[axis] = center[axis] + offset + scaled;
                }
                BoxProposal::one_hot(Aabb::new(min, max)?, gt.class_id, num_classes)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    Ok(Scene {
        cloud,
        num_classes,
        gt_boxes,
        gt_masks,
        proposals,
    })
}

fn sample_instance_color(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Vec3> {
    for _ in 0..10_000 {
        let c = [
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
        ];
        if linalg::dist(c, cfg.background_color) >= cfg.color_margin {
            return Ok(c);
        }
    }
    Err(Error::Generation(
        "could not sample an instance color away from the background".into(),
    ))
}
