pub mod eval;
pub mod gradlab;
pub mod purity;
pub mod sweep;
pub mod train;
