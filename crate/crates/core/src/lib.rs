pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod labels;
pub mod model;
pub mod phantom;
pub mod prompting;
pub mod report;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
