pub mod agecode;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod evalprobe;
pub mod graph;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod nnprim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
