//! Model soups: fuse several finetuned checkpoints of one architecture into
//! a single model by uniform averaging, greedy averaging, or component-wise
//! mixing with optimized per-component factors.

pub mod bench;
pub mod cli;
pub mod dfo;
pub mod partition;
pub mod report;
pub mod seeds;
pub mod soups;
pub mod tensor_store;

pub use partition::{auto_partition, mix_components, MixingVector, PartitionSpec, Strategy};
pub use soups::{
    greedy_soup, manifold_mix_soup, uniform_soup, Evaluator, ManifoldConfig, ModelPool, PoolMember, SoupReport,
};
pub use tensor_store::{lincomb, load, mean, save, ParameterSet, Tensor};
