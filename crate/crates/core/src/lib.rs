pub mod archspec;
pub mod bench;
pub mod fxp;
pub mod nnir;
pub mod scheduler;
pub mod vm;
