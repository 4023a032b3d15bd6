pub mod finetune;
pub mod generate;
pub mod gradcheck;
pub mod params;
pub mod train;
