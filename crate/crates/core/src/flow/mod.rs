//! Motion estimation: the extrapolation loss, its divergence penalty, a
//! variational optimizer and a Lucas-Kanade baseline.

mod divergence;
mod loss;
mod lucas_kanade;
mod optimize;

pub use divergence::{divergence, loss_pi, Divergence};
pub use loss::{
    loss_multiscale, loss_sequence, loss_single, loss_total, loss_total_with_grad, Criterion, LossBreakdown,
    LossConfig,
};
pub use lucas_kanade::{estimate_lucas_kanade, LucasKanade};
pub use optimize::{
    estimate_variational, gradient_check, precipitating, split_inputs, Estimate, GradCheck, Init, LevelStatus,
    OptimizerConfig, TraceRow,
};
