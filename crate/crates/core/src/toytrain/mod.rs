//! Toy end-to-end detector on synthetic scenes: scene generation, a small
//! two-level convolutional detector with hand-written gradients, the SGD
//! loop in both assignment modes, and AP evaluation.

pub mod conv;
pub mod detector;
pub mod eval;
pub mod scene;
pub mod train;

pub use detector::ToyDetector;
pub use eval::{average_precision, nms, Detection};
pub use scene::{generate_scene, SyntheticScene};
pub use train::{evaluate, train, train_with, AssignMode, EvalReport, StepRecord, ToyModel, TrainConfig, TrainOutcome};
