pub mod cli;
pub mod datagen;
pub mod dynmodel;
pub mod envsuite;
pub mod error;
pub mod evalkit;
pub mod numkit;
pub mod offpolicy;
pub mod pipeline;
pub mod relabel;
pub mod tae;
pub mod trainer;
