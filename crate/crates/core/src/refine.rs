//! Occupancy-ratio statistics per class and the top-k binary relabeling
//! used to refine mined masks: each class gets a shape prior equal to the
//! mean fraction of in-box points its instances occupy, and each subset
//! keeps exactly that fraction of its highest-scoring points.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mining::{PointSubset, ScoreField, SeedLabels, SubsetState};
use crate::pipeline::InstanceCandidate;

/// Mean occupancy and instance count of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassOccupancy {
    pub instance_count: usize,
    pub mean_ratio: f64,
}

/// Per-instance record: foreground vs in-box point counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceOccupancy {
    pub proposal_id: usize,
    pub class_id: usize,
    pub foreground_points: usize,
    pub box_points: usize,
}

/// Occupancy statistics over a set of instances. Classes without any
/// instance are simply absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OccupancyStats {
    pub per_class: BTreeMap<usize, ClassOccupancy>,
    pub per_instance: Vec<InstanceOccupancy>,
}

impl OccupancyStats {
    pub fn class_ratio(&self, class_id: usize) -> Option<f64> {
        self.per_class.get(&class_id).map(|c| c.mean_ratio)
    }

    /// Aligned text table: class, instance count, mean occupancy.
    pub fn to_table(&self, header: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("{header}\n"));
        out.push_str(&format!("{:>6} {:>10} {:>12}\n", "class", "instances", "occupancy"));
        for (class, c) in &self.per_class {
            out.push_str(&format!(
                "{:>6} {:>10} {:>12.4}\n",
                class, c.instance_count, c.mean_ratio
            ));
        }
        out
    }

    /// CSV rows `class,instances,mean_occupancy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,instances,mean_occupancy\n");
        for (class, c) in &self.per_class {
            out.push_str(&format!("{},{},{}\n", class, c.instance_count, c.mean_ratio));
        }
        out
    }
}

/// Per-class mean of (instance points / in-box points). Instances are
/// matched to their subsets by proposal id; an empty instance list yields
/// empty statistics.
pub fn occupancy_ratio(
    instances: &[InstanceCandidate],
    subsets: &[PointSubset],
) -> Result<OccupancyStats> {
    let by_proposal: BTreeMap<usize, &PointSubset> =
        subsets.iter().map(|s| (s.proposal_id, s)).collect();
    let mut per_instance = Vec::with_capacity(instances.len());
    let mut sums: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for inst in instances {
        let subset = by_proposal.get(&inst.proposal_id).ok_or_else(|| {
            Error::Config(format!(
                "instance references unknown proposal {}",
                inst.proposal_id
            ))
        })?;
        if subset.is_empty() {
            return Err(Error::DegenerateSubset(format!(
                "proposal {} subset is empty",
                inst.proposal_id
            )));
        }
        let record = InstanceOccupancy {
            proposal_id: inst.proposal_id,
            class_id: inst.class_id,
            foreground_points: inst.points.len(),
            box_points: subset.len(),
        };
        let entry = sums.entry(inst.class_id).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += record.foreground_points as f64 / record.box_points as f64;
        per_instance.push(record);
    }
    let per_class = sums
        .into_iter()
        .map(|(class, (count, total))| {
            (
                class,
                ClassOccupancy {
                    instance_count: count,
                    mean_ratio: total / count as f64,
                },
            )
        })
        .collect();
    Ok(OccupancyStats {
        per_class,
        per_instance,
    })
}

/// Binary labels keeping the `max(1, round(occupancy * N))` points with
/// the highest normalized scores (ties to the lower global index).
/// `None` when the subset's class has no statistics; callers keep the
/// soft labels in that case.
pub fn binary_topk_labels(
    sprime: &[f64],
    subset: &PointSubset,
    stats: &OccupancyStats,
) -> Option<SeedLabels> {
    let ratio = stats.class_ratio(subset.class_id)?;
    debug_assert_eq!(sprime.len(), subset.len());
    let n = subset.len();
    let keep = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        sprime[y]
            .partial_cmp(&sprime[x])
            .expect("finite normalized scores")
            .then(subset.global(x).cmp(&subset.global(y)))
    });
    let mut values = vec![0.0; n];
    for &j in order.iter().take(keep) {
        values[j] = 1.0;
    }
    let discriminative = values.iter().map(|&v| v == 1.0).collect();
    Some(SeedLabels {
        values,
        discriminative,
    })
}

/// Refinement energy: the same BCE as the seed loss, evaluated against the
/// binary top-k labels carried by the states.
pub fn refinement_loss(field: &ScoreField, states: &[SubsetState]) -> f64 {
    crate::mining::seed_loss(field, states)
}

pub fn refinement_loss_grad(
    field: &ScoreField,
    states: &[SubsetState],
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    crate::mining::seed_loss_grad(field, states, weight, grad)
}
