pub mod config;
pub mod eval;
pub mod geodesic;
pub mod gsa;
pub mod lsdmp;
pub mod mesh;
pub mod model;
pub mod physics;
pub mod sim;
pub mod tensor;
pub mod trainer;
