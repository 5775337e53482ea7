//! Box-supervised point-cloud instance-mask mining.
//!
//! Given a point cloud and axis-aligned box proposals, the engine mines
//! per-instance foreground masks by direct energy minimization over a
//! per-point score field: seed labeling inside each box, semantic
//! propagation over neighborhood balls, smoothing along a property-affinity
//! graph, and occupancy-ratio-guided binary refinement, followed by
//! instance-mask NMS and mAP evaluation. A consistency-regularization
//! module scores the agreement of proposal sets across input perturbations,
//! and a synthetic scene generator with designed per-class occupancies
//! provides ground truth for verification.
//!
//! Interchangeable strategies sit behind name-keyed registries:
//! [`pipeline::ProposalRegistry`] for proposal sources (`gt`, `jitter`,
//! `file`) and [`synth::ShapeRegistry`] for synthetic instance shapes
//! (`full-box`, `shell`, `l-shape`).

pub mod consistency;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod mining;
pub mod optimize;
pub mod perturb;
pub mod pipeline;
pub mod refine;
pub mod synth;

pub use consistency::{
    consistency_loss, pair_proposals, BoxProposal, ConsistencyConfig, ConsistencyLoss,
};
pub use error::{Error, ParseErrorKind, Result};
pub use evaluate::{map_at, EvalReport, GroundTruthInstance, Prediction};
pub use geometry::{
    aabb_iou, build_grid, mask_iou, points_in_box, radius_neighbors, Aabb, GridIndex, PointCloud,
};
pub use io::{load_scene, save_scene, Scene};
pub use mining::{MiningConfig, PointSubset, ScoreField};
pub use optimize::{minimize, EnergyReport, LossWeights, ScheduleConfig};
pub use perturb::{
    apply_to_box, apply_to_points, compose_perturbation, rotation_matrix, PerturbationMatrix,
    PerturbationSpec,
};
pub use pipeline::{
    mine_scene, nms, InstanceCandidate, MineOutcome, PipelineConfig, ProposalRegistry,
    ProposalSource,
};
pub use refine::{binary_topk_labels, occupancy_ratio, OccupancyStats};
pub use synth::{generate_scene, ClassRecipe, ShapeRecipe, ShapeRegistry, SynthConfig};
