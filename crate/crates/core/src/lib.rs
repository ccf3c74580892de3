pub mod backbones;
pub mod chunking;
pub mod corpus;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod metadata;
pub mod model;
pub mod nn;
pub mod optim;
pub mod split;
pub mod tensor;
pub mod training;
