//! Tree-based speculative decoding with a mixture-of-experts draft model,
//! on a small deterministic transformer target.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod draft;
pub mod error;
pub mod harness;
pub mod numkernel;
pub mod report;
pub mod sampling;
pub mod session;
pub mod target;
pub mod train;
pub mod tree;
pub mod verify;

pub use config::{load_config, parse_config, RunConfig};
pub use draft::{DraftConfig, Drafter, JakiroDraft};
pub use error::{Error, Result};
pub use numkernel::{BoolMatrix, Matrix, ProbVec};
pub use report::{read_report, write_report, Report};
pub use sampling::{Chooser, RngChooser};
pub use session::{run_session, DecodeSettings, Method, Metrics};
pub use target::{FeatureVec, TargetConfig, TargetModel, TokenId};
pub use train::{TrainBatch, TrainConfig};
pub use tree::{DraftNode, DraftTree, GrowConfig, TreeMask, TreeShape};
pub use verify::VerifyOutcome;
