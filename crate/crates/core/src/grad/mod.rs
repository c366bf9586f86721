//! Gradients of the rasterizer, finite-difference checking and scene fitting.

mod backward;
mod check;
mod optim;

pub use backward::{activation_backward, adjoint_dot, backward_render, ParamGradients};
pub use check::{
    check_all, finite_diff_check, relative_error, GradCheckReport, GradScene, ParamClass, GRADCHECK_TOLERANCE,
};
pub use optim::{
    evaluate, optimize_cloud, optimize_cloud_with, AdamConfig, FitConfig, FitParams, FitResult, FitView, Group,
    LearningRates, Schedule,
};

#[cfg(test)]
mod tests;
