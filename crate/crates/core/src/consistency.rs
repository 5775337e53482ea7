//! Perturbation-consistency regularization over box proposals: pair the
//! two prediction branches by nearest centers, then score semantic (KL)
//! and geometric (L1 center) agreement.

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::linalg::{self, Vec3};
use crate::perturb::{apply_to_box, PerturbationMatrix};

/// A box proposal: axis-aligned box, class distribution, derived class id
/// (argmax, ties to the lower channel) and box center.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxProposal {
    pub aabb: Aabb,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    pub center: Vec3,
}

impl BoxProposal {
    /// Validating constructor: probabilities nonnegative and summing to 1
    /// within 1e-6; class id derived as the argmax.
    pub fn new(aabb: Aabb, class_probs: Vec<f64>) -> Result<Self> {
        if class_probs.is_empty() {
            return Err(Error::Config("proposal needs at least one class".into()));
        }
        if class_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("class probabilities must be >= 0".into()));
        }
        let sum: f64 = class_probs.iter().sum();
        if (sum - 1.0).abs() >= 1e-6 {
            return Err(Error::Config(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        let class_id = argmax(&class_probs);
        let center = aabb.center();
        Ok(Self {
            aabb,
            class_probs,
            class_id,
            center,
        })
    }

    /// One-hot proposal for a known class.
    pub fn one_hot(aabb: Aabb, class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::Config(format!(
                "class {class_id} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class_id] = 1.0;
        Self::new(aabb, probs)
    }

    /// Constructor with an explicit class id, bypassing the argmax rule.
    /// Used for degenerate fixtures and external detectors that report a
    /// class separately from their distribution.
    pub fn with_class_id(aabb: Aabb, class_probs: Vec<f64>, class_id: usize) -> Result<Self> {
        let mut p = Self::new(aabb, class_probs)?;
        if class_id >= p.class_probs.len() {
            return Err(Error::Config(format!(
                "class {class_id} out of range for {} classes",
                p.class_probs.len()
            )));
        }
        p.class_id = class_id;
        Ok(p)
    }

    /// The proposal transformed by a perturbation: box re-tightened,
    /// center recomputed, class distribution carried over.
    pub fn perturbed(&self, m: &PerturbationMatrix) -> Self {
        let aabb = apply_to_box(m, &self.aabb);
        Self {
            aabb,
            class_probs: self.class_probs.clone(),
            class_id: self.class_id,
            center: aabb.center(),
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index pairs into two proposal sets; each index used at most once per side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalPairing {
    pub pairs: Vec<(usize, usize)>,
}

/// Weights and smoothing for the combined consistency loss.
#[derive(Debug, Clone)]
pub struct ConsistencyConfig {
    pub lambda_semantic: f64,
    pub lambda_geometric: f64,
    pub kl_epsilon: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            lambda_semantic: 1.0,
            lambda_geometric: 1.0,
            kl_epsilon: 1e-8,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_semantic < 0.0 || self.lambda_geometric < 0.0 {
            return Err(Error::Config("consistency weights must be >= 0".into()));
        }
        if self.kl_epsilon.is_nan() || self.kl_epsilon <= 0.0 {
            return Err(Error::Config("kl_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Greedy nearest-center matching: repeatedly pair the globally closest
/// unmatched centers (ties by the lower index pair); leftovers unmatched.
pub fn pair_proposals(a: &[BoxProposal], b: &[BoxProposal]) -> Result<ProposalPairing> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(
            "cannot pair empty proposal sets".into(),
        ));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            candidates.push((linalg::dist(pa.center, pb.center), i, j));
        }
    }
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .expect("finite center distances")
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::with_capacity(a.len().min(b.len()));
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
            if pairs.len() == a.len().min(b.len()) {
                break;
            }
        }
    }
    pairs.sort_unstable();
    Ok(ProposalPairing { pairs })
}

/// KL divergence of two distributions after flooring both at `eps` and
/// renormalizing.
fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let floor_norm = |d: &[f64]| -> Vec<f64> {
        let floored: Vec<f64> = d.iter().map(|v| v.max(eps)).collect();
        let sum: f64 = floored.iter().sum();
        floored.into_iter().map(|v| v / sum).collect()
    };
    let p = floor_norm(p);
    let q = floor_norm(q);
    p.iter()
        .zip(&q)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Mean over pairs of `D_KL(p_a || p_b)`, distributions eps-smoothed.
pub fn semantic_consistency(
    pairing: &ProposalPairing,
    a: &[BoxProposal],
    b: &[BoxProposal],
    eps: f64,
) -> f64 {
    if pairing.pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairing
        .pairs
        .iter()
        .map(|&(i, j)| kl_divergence(&a[i].class_probs, &b[j].class_probs, eps))
        .sum();
    total / pairing.pairs.len() as f64
}

/// Mean over pairs of the L1 distance between paired centers.
pub fn geometric_consistency(
    pairing: &ProposalPairing,
    a: &[BoxProposal],
    b: &[BoxProposal],
) -> f64 {
    if pairing.pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairing
        .pairs
        .iter()
        .map(|&(i, j)| linalg::l1_norm(linalg::sub(a[i].center, b[j].center)))
        .sum();
    total / pairing.pairs.len() as f64
}

/// Combined consistency loss split into its weighted terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyLoss {
    pub total: f64,
    pub semantic: f64,
    pub geometric: f64,
}

/// Pair the two sets and combine both terms:
/// `total = lambda_semantic * semantic + lambda_geometric * geometric`.
pub fn consistency_loss(
    a: &[BoxProposal],
    b: &[BoxProposal],
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyLoss> {
    cfg.validate()?;
    let pairing = pair_proposals(a, b)?;
    let semantic = semantic_consistency(&pairing, a, b, cfg.kl_epsilon);
    let geometric = geometric_consistency(&pairing, a, b);
    Ok(ConsistencyLoss {
        total: cfg.lambda_semantic * semantic + cfg.lambda_geometric * geometric,
        semantic,
        geometric,
    })
}
