pub mod data;
pub mod detectors;
pub mod embed;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod synth;
