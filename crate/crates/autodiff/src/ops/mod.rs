pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod spatial;
pub mod stats;
