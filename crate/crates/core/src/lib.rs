pub mod attack;
pub mod backend;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod microlm;
pub mod paraphrase;
pub mod pipeline;
pub mod selfprompt;

pub use error::{Error, Result};
