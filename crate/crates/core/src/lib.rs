pub mod backbone;
pub mod cl;
pub mod context;
pub mod container;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod numerics;
pub mod pool;
