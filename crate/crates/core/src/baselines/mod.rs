//! Comparison methods: an unscented Kalman filter and a mixture density network.

mod mdn;
mod ukf;

pub use mdn::{MdnConfig, MdnModel, MixtureParams, MIN_LOG_STD};
pub use ukf::{
    sigma_points, ukf_predict, ukf_step, ukf_update, DrivingUkf, GaussianBelief, SigmaPoints, UkfParams,
};
