pub mod cli;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod oracle;
pub mod orchestrator;
pub mod prompt;
pub mod report;
pub mod seeding;
pub mod survey;

pub use error::{Error, Result};
