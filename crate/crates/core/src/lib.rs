pub mod data;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod norm;
pub mod optim;
pub mod params;
pub mod pipelines;
pub mod sim;
pub mod tape;
pub mod tensor;
