//! Worst-case-optimal affine control policies for networks of linear dynamical
//! agents under four information structures: centralized, partially nested, and
//! local information exchange with rectangular or flexible state-forecast sets.
//!
//! The pipeline: [`model`] describes the physical network, [`reformulate`]
//! compiles each robust design problem into a deterministic linear program via
//! affine decision rules and polyhedral dualization, [`lp`] solves it, [`admm`]
//! solves the local design by consensus among the agents, and [`simulate`]
//! evaluates the resulting policies in closed loop. [`scenarios`] generates the
//! built-in experiment families (illustrative two-agent system, cooperative
//! energy hub, supply chain with quantity-flexibility contracts).

pub mod admm;
pub mod lp;
pub mod model;
pub mod policy;
pub mod reformulate;
pub mod scenarios;
pub mod simulate;
pub mod uncertainty;
