//! ACLA: an augmented neural ODE whose vector field is an
//! attention → convolution → LSTM → linear network, for lithium-ion battery
//! state-of-health trajectories and end-of-life estimation from
//! constant-current charging curves.
//!
//! Everything numeric is built in-crate: reverse-mode autodiff
//! ([`autodiff`]), adaptive and fixed-step ODE solvers with adjoint
//! gradients ([`odesolve`]), network layers ([`layers`]), the model
//! ([`model`]), charging-curve features ([`features`]), data handling and a
//! synthetic degradation generator ([`data`]), training ([`train`]) and
//! evaluation ([`eval`]).

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod features;
pub mod layers;
pub mod model;
pub mod odesolve;
pub mod train;
