//! Inner approximations of robust reach-avoid sets via sum-of-squares
//! programming, with grid and simulation baselines.

pub mod certify;
pub mod disturbance;
pub mod hjgrid;
pub mod model;
pub mod moments;
pub mod pipeline;
pub mod poly;
pub mod sdp;
pub mod simulate;
pub mod soscompile;
