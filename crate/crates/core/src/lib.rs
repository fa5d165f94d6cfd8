pub mod config;
pub mod corpus;
pub mod debias;
pub mod io;
pub mod metrics;
pub mod modelio;
pub mod normalize;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod stats;
pub mod table;
