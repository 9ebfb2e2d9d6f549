pub mod error;
pub mod graph;
pub mod math;
pub mod oracle;
pub mod pipeline;
pub mod refine;
pub mod sampler;
pub mod synth;
pub mod text;
pub mod tree;

pub use error::{Error, Result};
pub use graph::{load_graph, Graph, NodeSet};
pub use pipeline::{run_pipeline, PipelineConfig, RunReport};
pub use tree::{minimize, EncodingTree};
