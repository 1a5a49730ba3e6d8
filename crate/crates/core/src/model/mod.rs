//! Network assembly, initialization, checkpoints and transfer learning.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, transfer_load, write_checkpoint, Checkpoint, CheckpointMeta, DigestCheck,
    TensorData, TensorRecord, FORMAT_VERSION, MAGIC,
};
pub use config::{fnv1a64, ConvSpec, NetworkConfig, ShapeStep, CLASSIFIER};
pub use network::{Network, Param, TransferReport};
