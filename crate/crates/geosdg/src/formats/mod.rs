pub mod checkpoint;
pub mod csvio;
pub mod tile;
