pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod langgraph;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod params;
pub mod phrase_graph;
pub mod synth;
pub mod tape;
pub mod train;
pub mod visual_graph;
pub mod weights;

pub use config::{Config, LossWeights, ModelConfig, OptimizerConfig, Toggles, WorldConfig};
pub use error::{Error, Result};
pub use geometry::{BBox, Offset, SoftLabelDist};
pub use langgraph::{Category, LanguageSceneGraph, RawParse, Span};
pub use model::{Inference, Model, Prediction, SceneInput};
