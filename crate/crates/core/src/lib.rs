//! Lane-change intention prediction over linguistic features.

pub mod bayes;
pub mod cli;
pub mod corpus;
pub mod exec;
pub mod features;
pub mod graph;
pub mod kge;
pub mod protocol;
pub mod sim;
pub mod table;
