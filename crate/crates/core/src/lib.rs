pub mod attacker;
pub mod channel;
pub mod dsp;
pub mod estimation;
pub mod keyschedule;
pub mod protocol;
pub mod qam;
pub mod rfmodel;
pub mod signal;
pub mod waveform;
