pub mod cli;
pub mod data;
pub mod decoding;
pub mod evalbench;
pub mod model;
pub mod numerics;
pub mod training;
