pub mod adapter;
pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod evaluation;
pub mod retrieval;
pub mod selector;

pub use bbox::BBox;
