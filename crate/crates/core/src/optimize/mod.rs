//! Loss computation, parameter updates, and keyframe-list maintenance.

pub mod adam;
pub mod keyframes;
pub mod loss;
pub mod ssim;

pub use adam::{step, Adam};
pub use keyframes::{overlap_fraction, update_keyframes, KeyframeList};
pub use loss::{
    add_iso_gradients, evaluate_losses, loss_iso, loss_lidar, loss_reg, loss_rgb, loss_smooth,
    LossEval, LossReport,
};
pub use ssim::{ssim_index, ssim_with_gradient};
