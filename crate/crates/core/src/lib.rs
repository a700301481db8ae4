pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod scoring;
pub mod trainer;

pub use backbone::{
    build_backbone, loss_aeu, loss_mse, BackboneConfig, BackboneKind, BackboneNet, BackboneOutput, Mode,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use error::{DdadError, Result};
pub use scoring::{
    ensemble_outputs, image_score, refine_with_uncertainty, score_inter, score_intra, score_pool, score_rec,
    AnomalyMap, EnsembleOutputs, ScoreKind, ScoredPool, SigmaPooling, SIGMA_FLOOR,
};
pub use trainer::{
    adam_step, train_dual_ensembles, train_ensemble, train_member, train_network, write_loss_csv, AdamState,
    EnsembleModule, Role, TrainConfig,
};
