pub mod ckpt;
pub mod denoiser;
pub mod dual;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod layers;
pub mod maskgen;
pub mod num;
pub mod optim;
pub mod params;
pub mod sample;
pub mod sched;
pub mod synthdata;
pub mod tape;
pub mod train;
pub mod types;
