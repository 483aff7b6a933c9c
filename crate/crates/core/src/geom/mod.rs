//! Rotation representations and the skeletal kinematic tree.

mod rotation;
mod skeleton;

pub use rotation::{
    axis_angle_to_matrix, interpolate_pose, matrix_to_6d, six_d_to_matrix, Pose, Rotation6D,
};
pub use skeleton::{build_adjacency, forward_kinematics, Adjacency, JointSpec, SkeletonGraph};
