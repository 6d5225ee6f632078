pub mod config;
pub mod deform;
pub mod edt;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod mesh;
pub mod nifti_io;
pub mod phantom;
pub mod pipeline;
pub mod sim;
pub mod similarity;
pub mod structure;
pub mod volume;

pub use error::{Error, Result};
pub use structure::{StructureClass, StructureId};
pub use volume::{Geometry, Interpolation, LabelMap, Point3, Volume};
