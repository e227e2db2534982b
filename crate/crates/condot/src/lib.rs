//! Conditional optimal transport with convex potential networks.
//!
//! The crate learns Monge maps `T(x) = grad_x psi(x, c)` where the potential
//! `psi` is convex in `x` by construction and conditioned on a context `c`
//! (a perturbation label, a dosage, an action combination). Around that core
//! sit closed-form Gaussian transport for warm starts, entropic and exact
//! couplings for evaluation, context embedding schemes, synthetic benchmark
//! generators, and a command-line front end.
//!
//! Module map:
//!
//! * [`tensor_core`]: dense matrices, SPD factorizations, Gaussian sampling.
//! * [`autodiff`]: reverse-mode tape over matrix ops, nested once for
//!   gradients of gradients.
//! * [`gaussian_ot`]: closed-form transport between Gaussians and the
//!   quadratic layers distilled from it.
//! * [`networks`]: input-convex and partially input-convex networks, their
//!   initialization schemes, and convexity enforcement.
//! * [`context`]: one-hot, metric (multidimensional scaling), and permutation
//!   invariant set embeddings of conditions.
//! * [`ot_metrics`]: Sinkhorn couplings, an exact small-instance solver,
//!   kernel two-sample distances.
//! * [`training`]: dual and semi-dual losses, Adam, the alternating min-max
//!   loop, checkpointing.
//! * [`datasets`]: synthetic benchmark families with stored oracle maps and
//!   split plans.
//! * [`cli`]: the `condot` command set; thin wrappers over library calls so
//!   tests can drive commands in-process.

pub mod autodiff;
pub mod cli;
pub mod context;
pub mod datasets;
pub mod gaussian_ot;
pub mod networks;
pub mod ot_metrics;
pub mod tensor_core;
pub mod training;
