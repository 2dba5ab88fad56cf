//! Lead-I ECG interval estimation: data ingestion, preprocessing, synthetic
//! data, a small autodiff engine, the IKres network, training, a rule-based
//! delineator and the evaluation of the classifier-gated PR estimate.

pub mod dataio;
pub mod delineate;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod sigproc;
pub mod synthgen;
pub mod tensor;
pub mod training;
