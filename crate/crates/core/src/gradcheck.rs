//! Central finite-difference audit of the analytic loss gradients on
//! randomized desk-size instances. The differenced function freezes the
//! per-subset state (labels, similarities, weights, normalizer) exactly as
//! the analytic gradients assume.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{build_grid, PointCloud};
use crate::mining::{self, MiningConfig, PointSubset, ScoreField, SubsetState};
use crate::refine::{self, ClassOccupancy, OccupancyStats};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random instances per loss.
    pub cases: usize,
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 20,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "gradient audit: central differences, step {}, tolerance {}\n",
            self.step, self.tolerance
        );
        out.push_str(&format!("{:>14} {:>14} {:>8}\n", "loss", "max_rel_err", "status"));
        for c in &self.checks {
            out.push_str(&format!(
                "{:>14} {:>14.3e} {:>8}\n",
                c.loss,
                c.max_rel_err,
                if c.max_rel_err < self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            ));
        }
        out
    }
}

struct CaseFixture {
    field: ScoreField,
    states: Vec<SubsetState>,
}

fn random_case(rng: &mut ChaCha8Rng, binary_labels: bool) -> CaseFixture {
    let n = rng.random_range(8..=64);
    let c = rng.random_range(2..=4);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ]
        })
        .collect();
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let normals: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            crate::linalg::normalize([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..1.0),
            ])
            .expect("nonzero by construction")
        })
        .collect();
    let cloud = PointCloud::new(positions, colors, normals).unwrap();
    let cfg = MiningConfig {
        radius: 0.08,
        k_neighbors: 10.min(n - 1),
        ..MiningConfig::default()
    };
    let grid = build_grid(&cloud, cfg.radius).unwrap();
    let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let field = ScoreField::from_logits(n, c, logits).unwrap();
    let class_id = rng.random_range(0..c);
    let subset = PointSubset::new(0, class_id, (0..n).collect(), n).unwrap();
    let mut state = SubsetState::prepare(&cloud, &grid, &field, subset, &cfg).unwrap();
    if binary_labels {
        let mut stats = OccupancyStats::default();
        stats.per_class.insert(
            class_id,
            ClassOccupancy {
                instance_count: 1,
                mean_ratio: rng.random_range(0.3..0.9),
            },
        );
        state.refresh_binary(&field, &cfg, &stats).unwrap();
    }
    CaseFixture {
        field,
        states: vec![state],
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

type LossFn<'a> = &'a dyn Fn(&ScoreField, &[SubsetState]) -> f64;
type GradFn<'a> = &'a dyn Fn(&ScoreField, &[SubsetState], &mut [f64]) -> f64;

/// Max relative error between the analytic gradient and central
/// differences of `loss_fn` over all logit coordinates.
fn check_loss(fixture: &CaseFixture, step: f64, loss_fn: LossFn, grad_fn: GradFn) -> f64 {
    let field = &fixture.field;
    let mut grad = vec![0.0; field.logits().len()];
    grad_fn(field, &fixture.states, &mut grad);
    let mut worst = 0.0f64;
    let mut logits = field.logits().to_vec();
    for i in 0..logits.len() {
        let orig = logits[i];
        logits[i] = orig + step;
        let plus = loss_fn(
            &ScoreField::from_logits(field.num_points(), field.num_classes(), logits.clone())
                .unwrap(),
            &fixture.states,
        );
        logits[i] = orig - step;
        let minus = loss_fn(
            &ScoreField::from_logits(field.num_points(), field.num_classes(), logits.clone())
                .unwrap(),
            &fixture.states,
        );
        logits[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}

/// Run the audit over `cases` random instances per loss.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seed_err = 0.0f64;
    let mut prop_err = 0.0f64;
    let mut property_err = 0.0f64;
    let mut refine_err = 0.0f64;
    for _ in 0..cfg.cases {
        let fixture = random_case(&mut rng, false);
        seed_err = seed_err.max(check_loss(
            &fixture,
            cfg.step,
            &mining::seed_loss,
            &|f, s, g| mining::seed_loss_grad(f, s, 1.0, g),
        ));
        prop_err = prop_err.max(check_loss(
            &fixture,
            cfg.step,
            &mining::propagation_loss,
            &|f, s, g| mining::propagation_loss_grad(f, s, 1.0, g),
        ));
        property_err = property_err.max(check_loss(
            &fixture,
            cfg.step,
            &|f, s| mining::property_loss(f, s).expect("graph has edges"),
            &|f, s, g| mining::property_loss_grad(f, s, 1.0, g).expect("graph has edges"),
        ));

        let fixture = random_case(&mut rng, true);
        refine_err = refine_err.max(check_loss(
            &fixture,
            cfg.step,
            &refine::refinement_loss,
            &|f, s, g| refine::refinement_loss_grad(f, s, 1.0, g),
        ));
    }
    Ok(GradCheckReport {
        checks: vec![
            LossCheck {
                loss: "seed",
                max_rel_err: seed_err,
            },
            LossCheck {
                loss: "propagation",
                max_rel_err: prop_err,
            },
            LossCheck {
                loss: "property",
                max_rel_err: property_err,
            },
            LossCheck {
                loss: "refinement",
                max_rel_err: refine_err,
            },
        ],
        step: cfg.step,
        tolerance: cfg.tolerance,
    })
}
