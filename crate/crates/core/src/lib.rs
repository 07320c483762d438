//! Reconstruction of continuous spatio-temporal fields from sparse pixel or
//! Fourier-domain samples with neural spatial modes and a constrained linear
//! spectrum, plus classical baselines, generators and evaluation tools.

pub mod baselines;
pub mod classical_dmd;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod decomposition;
pub mod error;
pub mod eval;
pub mod field_net;
pub mod io;
pub mod model;
pub mod neuraldmd;
pub mod observation;
pub mod training;
pub mod video;

pub use decomposition::{ModalDecomposition, ModeLayout, TimeAxis};
pub use error::{Error, Result};
pub use model::{FieldModel, QuerySet};
pub use neuraldmd::{ModelConfig, NeuralModalModel};
pub use video::{Grid, VideoGrid};
