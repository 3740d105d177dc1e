pub mod accounting;
pub mod checkpoint;
pub mod features;
pub mod graph;
pub mod layers;
pub mod model;
pub mod skeleton;
pub mod tensor;
pub mod train;
