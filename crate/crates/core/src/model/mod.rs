//! The all-weather restoration network and its blocks.

pub mod blocks;
pub mod config;
pub mod network;
pub mod pad;

pub use blocks::{scaled_dot_attention, ForwardCtx};
pub use config::NetworkConfig;
pub use network::{adaptive_mixup, init_parameters, network_forward, restore, Network, NetworkOutputs};
pub use pad::{reflect_pad_to, reflect_pad_to_multiple, CropRecord};

#[cfg(test)]
mod tests;
