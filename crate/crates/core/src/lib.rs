//! Gaussian-mixture color lookup tables.
//!
//! A color transform is represented as a mixture of learnable 3D Gaussian
//! primitives, each carrying a local affine color map, blended with a
//! global affine base transform. The crate fits such models to grid LUTs
//! or color pairs, evaluates and bakes them, generates them for many
//! styles from one conditional generator, and edits them locally.

pub mod color;
pub mod glut;
pub mod lut_io;
pub mod train;
pub mod eval;
pub mod cglut;
pub mod editing;
pub mod format;

pub use color::{Lab, Rgb};
pub use glut::{GaussianPrimitive, GlutModel, PreparedGlut, WeightVector};
pub use lut_io::{ColorPairSet, CubeLut, Image};
pub use cglut::{CglutConfig, CglutModel, GenerationMode};
pub use editing::{EditConstraint, EditError, EditJournal, EditRecord};
pub use eval::{BenchReport, EvalReport};
pub use format::{FormatError, ModelFile};
pub use train::{FitData, TrainConfig, TrainError};
