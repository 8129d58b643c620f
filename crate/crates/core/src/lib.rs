//! Linear-complexity hub-and-spoke graph attention.
//!
//! Graph nodes ("spokes") talk locally through message passing and globally
//! through a set of roughly `sqrt(N)` virtual "hubs". Every spoke is wired to
//! exactly `k` hubs; after each layer the wiring is recomputed from the
//! attention scores and the hub-to-hub feature distances.

mod names;

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod hubs;
pub mod metrics;
pub mod model;
pub mod params;
pub mod partition;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GraphBatch, GraphCSR, Labels};
pub use hubs::{AssignmentMatrix, AttnScores, HubDistances};
pub use model::{Arch, HeadKind, ModelConfig, ModelState, PreparedBatch, TrainConfig};
pub use params::{ParamId, ParamStore};
pub use partition::{ClusterStrategy, Clustering};
pub use tensor::{Tape, Tensor, Var};
