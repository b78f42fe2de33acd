pub mod eval;
pub mod experiment;
pub mod grad;
pub mod net;
pub mod shapes;
pub mod train;
pub mod transfer;
