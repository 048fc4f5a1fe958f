//! Sparse neural network layers whose active neurons are sampled with
//! locality-sensitive hashing, for classifiers with very wide output layers.

pub mod autotune;
pub mod data;
pub mod error;
pub mod lsh;
pub mod nn;
pub mod sparse;
pub mod trainer;

pub use autotune::{autotune, plan_cost_ratio, AutotuneConfig, AutotunePlan};
pub use error::{DataError, Error, Result};
pub use lsh::{HashTable, NeuronIndex, QueryResult, QueryScratch, SrpHasher};
pub use sparse::{densify, sparse_dense_dot, sparsify, DenseVector, SparseVector};
pub use nn::{
    loss_grad_softmax_ce, Activation, ActiveSet, ForwardMode, LayerGradients, LayerSpec, Network, Origin,
    SparseLayer,
};
pub use data::{parse_xc, synth_clustered, Example, XcDataset};
pub use trainer::{
    evaluate, precision_at_k, predict, predict_top_k, train, AdamParams, BatchRecord, EpochRecord, EvalReport,
    InferenceMode, SparseAdamState, TrainConfig, TrainReport, Trainer,
};
