pub mod numgrad;
pub mod geometry;
pub mod synthgen;
pub mod lfc;
pub mod backbone;
pub mod pipeline;
pub mod trainer;
pub mod evalcli;
