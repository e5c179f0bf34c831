pub mod bench;
pub mod embed;
pub mod evaluate;
pub mod noise;
pub mod report;
pub mod score;
pub mod select;
