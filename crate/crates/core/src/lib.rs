pub mod bounds;
pub mod dataio;
pub mod dynsys;
pub mod fiats;
pub mod harness;
pub mod rng;
pub mod tensor;
