pub mod autodiff;
pub mod ctc;
pub mod frontend;
pub mod data;
pub mod config;
pub mod model;
pub mod training;
pub mod decoding;
pub mod bleu;
pub mod cli;
