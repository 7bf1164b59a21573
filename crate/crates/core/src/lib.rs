//! State-space deep Gaussian processes.
//!
//! A deep Gaussian process is built as a hierarchy of Matérn SDEs whose lengthscales and
//! magnitudes are driven by parent processes ([`graph`]). The joint system is discretized
//! ([`discretize`]) and then estimated with Gaussian filters and smoothers ([`gaussian`]),
//! particle methods ([`particle`]) or MAP optimization ([`map`]). [`batch`] holds the
//! conventional Gram-matrix formulation used as a baseline and as a reference.

pub mod batch;
pub mod covariance_analysis;
pub mod data;
pub mod discretize;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod jet;
pub mod linalg;
pub mod map;
pub mod matern;
pub mod optim;
pub mod particle;

pub use data::{Schedule, Step, TimeSeriesData};
pub use discretize::{DiscretizedTransition, Scheme, TransitionSet};
pub use error::{Error, Result};
pub use gaussian::{FilterKind, FilterOutput, GaussianBelief};
pub use graph::{build_dgp, DgpModel, DgpNode, NodeId, ParamSource, WrappingKind};
pub use matern::{LtiSde, MaternSpec};
