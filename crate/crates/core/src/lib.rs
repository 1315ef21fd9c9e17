pub mod autodiff;
pub(crate) mod codec;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
