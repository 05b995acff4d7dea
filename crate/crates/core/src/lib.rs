pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod derev;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod room;
pub mod scalar;
pub mod selftest;
pub mod signal;
pub mod t60net;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Signal32 = signal::AudioSignal<f32>;
pub type Signal64 = signal::AudioSignal<f64>;
pub type T60Net32 = t60net::T60Net<f32>;
pub type T60Net64 = t60net::T60Net<f64>;
pub type DerevNet32 = derev::DerevNet<f32>;
pub type DerevNet64 = derev::DerevNet<f64>;
pub type JointNet32 = derev::JointNet<f32>;
pub type JointNet64 = derev::JointNet<f64>;
