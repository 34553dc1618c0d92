//! Desk-scale training: Gaussian blob data, a frozen random encoder/readout
//! around the MoE block, and plain SGD.

mod data;
mod loss;
mod train;

pub use data::{gen_blobs, load_csv, split_train_test, Dataset, DatasetKind, DatasetSpec, Split};
pub use loss::{
    encoded_grad, encoded_loss, ensure_same_backbone, evaluator, grad_model_loss, model_loss, Encoded, FrozenBackbone,
    LossStats,
};
pub use train::{train_from, train_sgd, TrainConfig, TrainOutcome};
