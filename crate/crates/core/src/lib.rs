pub mod engines;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod interaction;
pub mod losses;
pub mod metrics;
pub mod phantom;
pub mod session;
pub mod volume;

pub use error::{Error, Result};

pub use engines::train::TrainConfig;
pub use engines::{Engine, EngineInput, LossKind, TinyCnn};
pub use geometry::{FramePose, FrameStack};
pub use harness::{CorpusSpec, EngineId, ExperimentConfig};
pub use interaction::{EditConfig, EditRecord, PixelScribble, Scribble};
pub use metrics::{MetricReport, Weighting};
pub use phantom::{CaseBundle, PhantomParams};
pub use session::{Session, SessionLog};
pub use volume::{BinaryMask, GridMeta, ScalarField, Voxel, VoxelSet};
