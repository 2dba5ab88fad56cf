//! Pipeline stages behind the `leadi` command. Each stage reads and writes
//! files under the directories of a [`config::RunConfig`].

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Ctx;
pub use config::RunConfig;
pub use error::CliError;
