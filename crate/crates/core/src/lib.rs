//! Sum-rate maximization for networked ISAC with movable antennas.
//!
//! Transmit BSs serve downlink users and illuminate a target while receive BSs
//! decode uplink users and the target echo. Beamformers, uplink powers,
//! receive filters and every antenna position are optimized by block
//! coordinate ascent on a WMMSE reformulation, with majorization-minimization
//! for the positions and a sensing-SINR floor throughout.

pub mod channel;
pub mod metrics;
pub mod solvers;
pub mod updates;
pub mod position;
pub mod engine;
pub mod cli;
