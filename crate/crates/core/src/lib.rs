pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod perceptual;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod reader;
pub mod schedule;
pub mod training;
pub mod volume;
