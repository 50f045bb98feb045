//! Reconstruction of ECG, respiration and arterial pressure waveforms from
//! PPG with a conditional flow-matching model built on diagonal state-space
//! layers.

pub mod dsp;
pub mod params;
pub mod record;
pub mod scalar;
pub mod ssm;
pub mod tape;
pub mod checkpoint;
pub mod config;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod synth;
pub mod train;
