//! Command-line tool and HTTP service for training and using detector
//! selectors.

pub mod cli;
pub mod jobs;
pub mod ops;
pub mod registry;
pub mod server;
pub mod store;
