//! Sites, server, wire format and the round loop.

mod message;
mod run;
mod server;
mod site;
mod transport;

pub use message::{Direction, RoundMessage, WIRE_VERSION};
pub use run::{
    average_trees, global_model, pretrain, run, run_fedavg, run_federation, run_local_only, site_indicator, site_shuffle_seed, FederationConfig,
    Method, PretrainConfig, RoundLog, RunOutput, SiteData, TrainConfig, Workload,
};
pub use server::{
    aggregate, assemble_global, ema_update, quantification_loss, synchronization_loss, SerqConfig, ServerState,
};
pub use site::{evaluate, predict, train_step, Route, SiteSetup, SiteState};
pub use transport::{Peer, Transport, TransportMode, WireRecord, WireStats};
