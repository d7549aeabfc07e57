//! Simultaneous multi-robot grasping and transport of large objects.

pub mod advisor;
pub mod camera;
pub mod candidates;
pub mod cloud;
pub mod dataset;
pub mod geometry;
pub mod kinematics;
pub mod local_grasp;
pub mod mesh;
pub mod metrics;
pub mod planner;
pub mod rng;
pub mod scene;
pub mod select;
pub mod shapes;

pub use cloud::PointCloud;
pub use geometry::{GeometryError, GraspPose, LossWeights, Pose};
pub use kinematics::{Configuration, RobotModel};
pub use mesh::Mesh;
pub use scene::{Scene, SceneSpec};
