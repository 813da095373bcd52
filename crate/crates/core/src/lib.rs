pub mod corpus;
pub mod eval;
pub mod layers;
pub mod models;
pub mod ngram;
pub mod params;
pub mod service;
pub mod tensor;
pub mod training;
