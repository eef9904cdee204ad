pub mod adaptation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mixture;
pub mod plot;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use adaptation::{AdaptationModule, AdapterModule, Factor, LoraModule};
pub use checkpoint::Checkpoint;
pub use config::{InferenceMode, RunConfig};
pub use error::{Error, Result};
pub use mixture::{AdaptedModel, MixtureSite, RoutingPolicy, RoutingSelection, SiteLayout};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Parameterized, Tensor};
pub use training::{OptimizerState, TrainConfig};
pub use transformer::{BackboneConfig, BackboneModel, InsertionPoint, Sharing, Variant};
