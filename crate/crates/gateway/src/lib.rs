//! Watermarking reverse proxy: forwards prediction requests to an upstream
//! classifier, watermarks the answers with the caller's key and logs every
//! query for later probing.

pub mod config;
pub mod log;
pub mod server;

pub use config::{ConfigError, GatewayConfig, TokenKey};
pub use log::{read_query_log, LogLine, OneOrMany, QueryLog};
pub use server::{router, start, token_seed, AppState, RunningGateway, TOKEN_HEADER};
