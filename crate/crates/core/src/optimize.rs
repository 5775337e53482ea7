//! Two-phase gradient descent over score-field logits: seed growth with
//! semantic propagation and property smoothing first, then occupancy-guided
//! binary refinement. Plain descent with a step decay schedule keeps the
//! frozen-state energy non-increasing.

use crate::error::{Error, Result};
use crate::mining::{self, MiningConfig, ScoreField, SubsetState};
use crate::pipeline::InstanceCandidate;
use crate::refine::{self, OccupancyStats};

/// Which energy is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Seed BCE + propagation + property smoothing.
    SeedGrowth,
    /// Refinement BCE + propagation + property smoothing.
    OccupancyRefine,
}

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::SeedGrowth => 1,
            Phase::OccupancyRefine => 2,
        }
    }
}

/// Relative weights of the four energy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seed: f64,
    pub propagation: f64,
    pub property: f64,
    pub refinement: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seed: 1.0,
            propagation: 1.0,
            property: 1.0,
            refinement: 1.0,
        }
    }
}

/// Iteration counts, step schedule and label refresh cadence.
#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub step_size: f64,
    /// Global iteration indices at which the step is multiplied by
    /// `decay_factor`, ascending.
    pub decay_points: Vec<usize>,
    pub decay_factor: f64,
    /// Refresh labels/similarities every this many iterations; 0 disables
    /// refreshing entirely (states stay frozen as prepared).
    pub label_refresh_every: usize,
    pub weights: LossWeights,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            phase1_iters: 600,
            phase2_iters: 200,
            step_size: 0.05,
            decay_points: vec![300, 450],
            decay_factor: 0.1,
            label_refresh_every: 10,
            weights: LossWeights::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::Config("step_size must be > 0".into()));
        }
        let decay_ok = self.decay_factor > 0.0 && self.decay_factor < 1.0;
        if !decay_ok {
            return Err(Error::Config("decay_factor must be in (0,1)".into()));
        }
        if self.decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_points must be ascending".into()));
        }
        let w = &self.weights;
        if w.seed < 0.0 || w.propagation < 0.0 || w.property < 0.0 || w.refinement < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Energy value split into its terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub seed: f64,
    pub propagation: f64,
    pub property: f64,
    pub refinement: f64,
}

/// One recorded iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub iteration: usize,
    pub phase: usize,
    pub energy: EnergyBreakdown,
    pub grad_norm: f64,
}

/// Per-iteration energies and the final gradient norm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub final_grad_norm: f64,
}

impl EnergyReport {
    /// CSV with one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,phase,total,seed,propagation,property,refinement,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.phase,
                r.energy.total,
                r.energy.seed,
                r.energy.propagation,
                r.energy.property,
                r.energy.refinement,
                r.grad_norm
            ));
        }
        out
    }
}

/// Weighted total energy for the given phase.
///
/// Subsets whose affinity graph has no edges contribute nothing to the
/// property term; the term errors only when every graph is empty (and its
/// weight is nonzero).
pub fn total_energy(
    field: &ScoreField,
    states: &[SubsetState],
    phase: Phase,
    weights: &LossWeights,
) -> Result<EnergyBreakdown> {
    let table = mining::ScoreTable::new(field);
    let mut b = EnergyBreakdown::default();
    match phase {
        Phase::SeedGrowth => {
            if weights.seed != 0.0 {
                b.seed = mining::bce_loss_t(&table, states);
            }
        }
        Phase::OccupancyRefine => {
            if weights.refinement != 0.0 {
                b.refinement = mining::bce_loss_t(&table, states);
            }
        }
    }
    if weights.propagation != 0.0 {
        b.propagation = mining::propagation_loss_t(&table, states);
    }
    if weights.property != 0.0 {
        b.property = mining::property_loss_t(&table, states)?;
    }
    b.total = weights.seed * b.seed
        + weights.propagation * b.propagation
        + weights.property * b.property
        + weights.refinement * b.refinement;
    Ok(b)
}

/// Weighted total energy plus its gradient with respect to the logits.
/// `grad` must match the field layout and is overwritten.
pub fn energy_gradient(
    field: &ScoreField,
    states: &[SubsetState],
    phase: Phase,
    weights: &LossWeights,
    grad: &mut [f64],
) -> Result<EnergyBreakdown> {
    assert_eq!(grad.len(), field.logits().len());
    grad.fill(0.0);
    let table = mining::ScoreTable::new(field);
    let mut b = EnergyBreakdown::default();
    match phase {
        Phase::SeedGrowth => {
            if weights.seed != 0.0 {
                b.seed = mining::bce_loss_grad_t(&table, states, weights.seed, grad);
            }
        }
        Phase::OccupancyRefine => {
            if weights.refinement != 0.0 {
                b.refinement = mining::bce_loss_grad_t(&table, states, weights.refinement, grad);
            }
        }
    }
    if weights.propagation != 0.0 {
        b.propagation = mining::propagation_loss_grad_t(&table, states, weights.propagation, grad);
    }
    if weights.property != 0.0 {
        b.property = mining::property_loss_grad_t(&table, states, weights.property, grad)?;
    }
    b.total = weights.seed * b.seed
        + weights.propagation * b.propagation
        + weights.property * b.property
        + weights.refinement * b.refinement;
    Ok(b)
}

/// Interim foreground masks after seed growth: the points currently
/// labeled 1 in each subset.
fn phase1_candidates(states: &[SubsetState]) -> Vec<InstanceCandidate> {
    states
        .iter()
        .filter_map(|st| {
            let points: Vec<usize> = (0..st.subset.len())
                .filter(|&j| st.labels.discriminative[j])
                .map(|j| st.subset.global(j))
                .collect();
            InstanceCandidate::new(st.subset.proposal_id, st.subset.class_id, points, 1.0).ok()
        })
        .collect()
}

/// Run both phases of gradient descent over the field logits, refreshing
/// labels and similarities on the configured cadence. Occupancy statistics
/// are computed once from the phase-1 masks and frozen for phase 2.
///
/// With refreshing disabled and a step below the stability bound the
/// recorded energy is non-increasing. Divergence past 1e6 x the initial
/// energy aborts with the partial report attached.
pub fn minimize(
    field: &mut ScoreField,
    states: &mut [SubsetState],
    mining_cfg: &MiningConfig,
    schedule: &ScheduleConfig,
) -> Result<(EnergyReport, OccupancyStats)> {
    schedule.validate()?;
    mining_cfg.validate()?;

    let mut loop_state = DescentLoop {
        mining_cfg,
        schedule,
        grad: vec![0.0; field.logits().len()],
        step: schedule.step_size,
        decay_cursor: 0,
        rows: Vec::with_capacity(schedule.phase1_iters + schedule.phase2_iters),
        initial: None,
    };

    loop_state.run(field, states, Phase::SeedGrowth, schedule.phase1_iters, 0, None)?;

    // Freeze occupancy statistics from the grown seed regions.
    if schedule.label_refresh_every > 0 {
        for st in states.iter_mut() {
            st.refresh_soft(field, mining_cfg)?;
        }
    }
    let subsets: Vec<_> = states.iter().map(|st| st.subset.clone()).collect();
    let stats = refine::occupancy_ratio(&phase1_candidates(states), &subsets)?;

    loop_state.run(
        field,
        states,
        Phase::OccupancyRefine,
        schedule.phase2_iters,
        schedule.phase1_iters,
        Some(&stats),
    )?;

    let final_grad_norm = loop_state.rows.last().map(|r| r.grad_norm).unwrap_or(0.0);
    Ok((
        EnergyReport {
            rows: loop_state.rows,
            final_grad_norm,
        },
        stats,
    ))
}

struct DescentLoop<'a> {
    mining_cfg: &'a MiningConfig,
    schedule: &'a ScheduleConfig,
    grad: Vec<f64>,
    step: f64,
    decay_cursor: usize,
    rows: Vec<EnergyRow>,
    initial: Option<f64>,
}

impl DescentLoop<'_> {
    fn run(
        &mut self,
        field: &mut ScoreField,
        states: &mut [SubsetState],
        phase: Phase,
        iters: usize,
        start: usize,
        stats: Option<&OccupancyStats>,
    ) -> Result<()> {
        for it in 0..iters {
            let global = start + it;
            let refresh_due = self.schedule.label_refresh_every > 0
                && global.is_multiple_of(self.schedule.label_refresh_every);
            // Phase 2 always needs binary labels at its first iteration.
            let force_binary = phase == Phase::OccupancyRefine && it == 0;
            if refresh_due || force_binary {
                for st in states.iter_mut() {
                    match phase {
                        Phase::SeedGrowth => st.refresh_soft(field, self.mining_cfg)?,
                        Phase::OccupancyRefine => st.refresh_binary(
                            field,
                            self.mining_cfg,
                            stats.expect("phase 2 has statistics"),
                        )?,
                    }
                }
            }
            while self.decay_cursor < self.schedule.decay_points.len()
                && self.schedule.decay_points[self.decay_cursor] == global
            {
                self.step *= self.schedule.decay_factor;
                self.decay_cursor += 1;
            }
            let breakdown =
                energy_gradient(field, states, phase, &self.schedule.weights, &mut self.grad)?;
            let grad_norm = self.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            self.rows.push(EnergyRow {
                iteration: global,
                phase: phase.index(),
                energy: breakdown,
                grad_norm,
            });
            let baseline = *self.initial.get_or_insert(breakdown.total);
            // One-sided explosion guard; the floor keeps zero-energy
            // starts (perfect seeds) from tripping it on tiny drift.
            if breakdown.total > 1e6 * baseline.abs().max(1e-3) {
                return Err(Error::Diverged {
                    iteration: global,
                    energy: breakdown.total,
                    initial: baseline,
                    report: Box::new(EnergyReport {
                        rows: self.rows.clone(),
                        final_grad_norm: grad_norm,
                    }),
                });
            }
            let logits = field.logits_mut();
            for (z, g) in logits.iter_mut().zip(&self.grad) {
                *z -= self.step * g;
            }
        }
        Ok(())
    }
}
