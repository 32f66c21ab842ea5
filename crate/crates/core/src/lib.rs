//! Block selection for transfer learning: a genetic algorithm picks which
//! blocks of a pre-trained CNN to fine-tune, and an optimal-transport dataset
//! distance scores how much each block's features shift between a source and
//! a target dataset.

pub mod error;
pub mod data;
pub mod ga;
pub mod harness;
pub mod model;
pub mod nn;
pub mod otdd;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
