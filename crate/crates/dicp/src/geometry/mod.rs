//! SE(2)/SE(3) transforms, exp/log maps, and pose errors.

mod pose;
mod se2;
mod se3;

pub use pose::{compose, exp_map, inverse, log_map, pose_error, Pose, Twist};
pub use se2::serde_repr as se2_serde;
pub use se2::Se2;
pub(crate) use se2::{PI_TOLERANCE, TAYLOR_THRESHOLD_2D};
pub use se3::Se3;
