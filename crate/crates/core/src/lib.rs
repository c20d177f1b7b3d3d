pub mod bev;
pub mod boxes;
pub mod config;
pub mod eval;
pub mod frustum;
pub mod geometry;
pub mod head;
pub mod height;
mod layers;
pub mod model;
pub mod ppm;
pub mod scene;
pub mod tensor;
pub mod train;
