pub mod evaluation;
pub mod features;
pub mod gemm;
pub mod ingest;
pub mod matrix;
pub mod nmf;
pub mod nn;
pub mod pipeline;
pub mod trainer;
pub mod weak2strong;
