pub mod conv;
pub mod dist;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod smooth;
pub mod upsample;
