//! Conditional flow matching on SO(3): group exponential and logarithm,
//! geodesic interpolants, the conditional target field, a vector-field
//! network, its regression loss and a manifold Euler integrator.
//!
//! Tangent vectors are body-frame axis-angle coordinates: the velocity of
//! `R(t)` is `w` when `dR/dt = R hat(w)`.

mod flow;
mod geometry;

pub use flow::{
    cfm_loss, cfm_loss_of, fraction_within, geodesic_velocity_fd, integrate_flow, train_cfm,
    CfmBatch, CfmConfig, PointMassField, So3Target, TangentField, VectorFieldArch, VectorFieldNet,
};
pub use geometry::{
    exp_at, exp_map, geodesic, geodesic_distance, hat, log_at, log_map, norm, quaternion_to_rot,
    sample_uniform_so3, target_vector_field, FieldConvention, Rot3, Tangent, BRANCH_MARGIN,
};
