//! Node daemon for agora: transports, message dispatch, ledger gossip, the
//! submit path, and the admin gateway.

pub mod cluster;
pub mod config;
pub mod dispatch;
pub mod gateway;
pub mod ledger_task;
pub mod node;
pub mod transport;
pub mod wire;

pub use cluster::Cluster;
pub use config::{ConfigError, NodeConfig, Timing};
pub use node::{
    start_node, start_node_with, NodeEnv, NodeHandle, NodeStatus, StartupError, SubmitError,
    SubmitOutcome,
};
pub use transport::{MemoryNetwork, TcpTransport, Transport};
