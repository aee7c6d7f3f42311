pub mod error;
pub mod foodspace;
pub mod gan;
pub mod image_eval;
pub mod imaging;
pub mod nn;
pub mod recipe_data;
pub mod retrieval;
pub mod synthbench;
pub mod vocab;

pub use error::{Error, Result};
