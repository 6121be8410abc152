//! ViT/CNN joint source-channel image codec with channel and hardware
//! impairment models, pilot framing and calibration, and feature analysis.

pub mod analysis;
pub mod channel;
pub mod codec;
pub mod error;
pub mod frame;
pub mod nn;

pub use analysis::LayerId;
pub use channel::{ChannelConfig, ChannelKind, Equalization, ImpairmentConfig};
pub use codec::{
    bandwidth_ratio, count_cost, parse_ratio, ArchSpec, Codec, CodecConfig, CostReport, StageKind, SymbolBlock,
};
pub use error::{Error, Result};
pub use frame::{PilotConfig, Pilots};
