//! Hierarchical deep Matérn process: every node is a conditionally linear Matérn SDE whose
//! lengthscale and magnitude are either fixed or wrapped values of a parent node in the
//! next layer. Stacking the node states gives one non-linear SDE
//! `dU = Λ(U) U dt + β(U) dW`.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discretize::{Scheme, TransitionSet};
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::jet::Scalar;
use crate::linalg::psd_factor;
use crate::matern::{
    companion_coefficients, dispersion_constant_sq, matern_sde_coefficients,
    solve_stationary_covariance, MaternSpec,
};

/// Exponential wrapping inputs are clamped to this range before exponentiation.
pub const EXP_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct NodeId {
    pub layer: usize,
    pub position: usize,
}

impl NodeId {
    pub const fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }
}

impl From<[usize; 2]> for NodeId {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<NodeId> for [usize; 2] {
    fn from(id: NodeId) -> Self {
        [id.layer, id.position]
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.layer, self.position)
    }
}

/// Positive map `g: ℝ → (0, ∞)` applied to parent values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WrappingKind {
    /// `g(u) = exp(u)`
    #[default]
    Exp,
    /// `g(u) = u² + c`
    SquarePlusC(f64),
    /// `g(u) = 1 / (u² + c)`
    InverseSquarePlusC(f64),
}

/// Value and first two derivatives of a wrapping function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrapped {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn wrap(kind: WrappingKind, u: f64) -> Wrapped {
    match kind {
        WrappingKind::Exp => {
            if u.abs() > EXP_CLAMP {
                let v = u.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
                Wrapped { value: v, d1: 0.0, d2: 0.0 }
            } else {
                let v = u.exp();
                Wrapped { value: v, d1: v, d2: v }
            }
        }
        WrappingKind::SquarePlusC(c) => Wrapped { value: u * u + c, d1: 2.0 * u, d2: 2.0 },
        WrappingKind::InverseSquarePlusC(c) => {
            let s = u * u + c;
            Wrapped {
                value: 1.0 / s,
                d1: -2.0 * u / (s * s),
                d2: (6.0 * u * u - 2.0 * c) / (s * s * s),
            }
        }
    }
}

impl WrappingKind {
    fn validate(&self) -> Result<()> {
        match *self {
            WrappingKind::Exp => Ok(()),
            WrappingKind::SquarePlusC(c) | WrappingKind::InverseSquarePlusC(c) => {
                if c > 0.0 && c.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("wrapping constant must be positive, got {c}")))
                }
            }
        }
    }

    /// `1 / g(z)`
    fn reciprocal<S: Scalar>(&self, z: &S) -> S {
        match *self {
            WrappingKind::Exp => {
                let zc = z.value();
                if zc.abs() > EXP_CLAMP {
                    z.lift((-zc.clamp(-EXP_CLAMP, EXP_CLAMP)).exp())
                } else {
                    z.scale(-1.0).exp()
                }
            }
            WrappingKind::SquarePlusC(c) => z.mul(z).add_scalar(c).recip(),
            WrappingKind::InverseSquarePlusC(c) => z.mul(z).add_scalar(c),
        }
    }

    /// `g(z)²`
    fn square<S: Scalar>(&self, z: &S) -> S {
        match *self {
            WrappingKind::Exp => {
                let zc = z.value();
                if zc.abs() > EXP_CLAMP {
                    z.lift((2.0 * zc.clamp(-EXP_CLAMP, EXP_CLAMP)).exp())
                } else {
                    z.scale(2.0).exp()
                }
            }
            WrappingKind::SquarePlusC(c) => {
                let g = z.mul(z).add_scalar(c);
                g.mul(&g)
            }
            WrappingKind::InverseSquarePlusC(c) => {
                let g = z.mul(z).add_scalar(c);
                g.mul(&g).recip()
            }
        }
    }
}

/// Where a node's lengthscale or magnitude comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSource {
    Fixed { fixed: f64 },
    Parent {
        parent: NodeId,
        #[serde(default)]
        wrap: WrappingKind,
    },
}

impl ParamSource {
    pub fn fixed(v: f64) -> Self {
        ParamSource::Fixed { fixed: v }
    }

    pub fn parent(parent: NodeId, wrap: WrappingKind) -> Self {
        ParamSource::Parent { parent, wrap }
    }

    pub fn parent_id(&self) -> Option<NodeId> {
        match self {
            ParamSource::Parent { parent, .. } => Some(*parent),
            ParamSource::Fixed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpNode {
    pub id: NodeId,
    #[serde(rename = "alpha")]
    pub smoothness_alpha: usize,
    pub lengthscale: ParamSource,
    pub magnitude: ParamSource,
}

impl DgpNode {
    pub fn new(id: NodeId, smoothness_alpha: usize, lengthscale: ParamSource, magnitude: ParamSource) -> Self {
        Self { id, smoothness_alpha, lengthscale, magnitude }
    }

    pub fn state_dim(&self) -> usize {
        self.smoothness_alpha + 1
    }
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub nodes: Vec<DgpNode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Resolved {
    Fixed(f64),
    /// State index of the parent's first component.
    Parent(usize, WrappingKind),
}

#[derive(Debug, Clone)]
pub struct DgpModel {
    nodes: Vec<DgpNode>,
    offsets: Vec<usize>,
    dim: usize,
    top: usize,
    lengthscales: Vec<Resolved>,
    magnitudes: Vec<Resolved>,
    p0: DMatrix<f64>,
    h_row: DMatrix<f64>,
}

pub fn build_dgp(nodes: Vec<DgpNode>) -> Result<DgpModel> {
    DgpModel::new(nodes)
}

impl DgpModel {
    pub fn new(nodes: Vec<DgpNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidHierarchy("model has no nodes".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.id.layer == 0 || n.id.position == 0 {
                return Err(Error::InvalidHierarchy(format!("node {} uses 1-based indices", n.id)));
            }
            if index.insert(n.id, i).is_some() {
                return Err(Error::DuplicateNode(n.id.layer, n.id.position));
            }
        }
        let layer_one: Vec<_> = nodes.iter().filter(|n| n.id.layer == 1).collect();
        if layer_one.len() != 1 || layer_one[0].id != NodeId::new(1, 1) {
            return Err(Error::InvalidHierarchy("layer 1 must hold exactly the node (1,1)".into()));
        }
        let top = index[&NodeId::new(1, 1)];

        let mut used_parents = HashSet::new();
        for n in &nodes {
            for (name, src) in [("lengthscale", &n.lengthscale), ("magnitude", &n.magnitude)] {
                match src {
                    ParamSource::Fixed { fixed } => {
                        let ok = if name == "lengthscale" { *fixed > 0.0 } else { *fixed >= 0.0 };
                        if !ok || !fixed.is_finite() {
                            return Err(Error::InvalidParameter(format!(
                                "node {}: fixed {name} {fixed} out of range",
                                n.id
                            )));
                        }
                    }
                    ParamSource::Parent { parent, wrap } => {
                        wrap.validate()?;
                        if !index.contains_key(parent) {
                            return Err(Error::InvalidHierarchy(format!(
                                "node {}: parent {} does not exist",
                                n.id, parent
                            )));
                        }
                        if parent.layer != n.id.layer + 1 {
                            return Err(Error::InvalidHierarchy(format!(
                                "node {}: parent {} is not in layer {}",
                                n.id,
                                parent,
                                n.id.layer + 1
                            )));
                        }
                        if !used_parents.insert(*parent) {
                            return Err(Error::InvalidHierarchy(format!(
                                "node {parent} has more than one child"
                            )));
                        }
                    }
                }
            }
        }
        for n in &nodes {
            if n.id.layer > 1 && !used_parents.contains(&n.id) {
                return Err(Error::InvalidHierarchy(format!("node {} has no child", n.id)));
            }
        }

        let mut offsets = Vec::with_capacity(nodes.len());
        let mut dim = 0;
        for n in &nodes {
            offsets.push(dim);
            dim += n.state_dim();
        }
        let resolve = |src: &ParamSource| match *src {
            ParamSource::Fixed { fixed } => Resolved::Fixed(fixed),
            ParamSource::Parent { parent, wrap } => Resolved::Parent(offsets[index[&parent]], wrap),
        };
        let lengthscales = nodes.iter().map(|n| resolve(&n.lengthscale)).collect();
        let magnitudes = nodes.iter().map(|n| resolve(&n.magnitude)).collect();

        let mut h_row = DMatrix::zeros(1, dim);
        h_row[(0, offsets[top])] = 1.0;

        let mut model = Self {
            nodes,
            offsets,
            dim,
            top,
            lengthscales,
            magnitudes,
            p0: DMatrix::zeros(dim, dim),
            h_row,
        };
        model.p0 = model.default_p0()?;
        Ok(model)
    }

    /// Block-diagonal stationary covariances evaluated at the parents' prior means (zero).
    fn default_p0(&self) -> Result<DMatrix<f64>> {
        let mut p0 = DMatrix::zeros(self.dim, self.dim);
        for (i, n) in self.nodes.iter().enumerate() {
            let eval = |r: Resolved| match r {
                Resolved::Fixed(v) => v,
                Resolved::Parent(_, w) => wrap(w, 0.0).value,
            };
            let ell = eval(self.lengthscales[i]);
            let sigma = eval(self.magnitudes[i]);
            let d = n.state_dim();
            let block = if sigma == 0.0 {
                DMatrix::zeros(d, d)
            } else {
                let spec = MaternSpec::new(n.smoothness_alpha, ell, sigma)?;
                solve_stationary_covariance(&matern_sde_coefficients(&spec))?
            };
            let o = self.offsets[i];
            p0.view_mut((o, o), (d, d)).copy_from(&block);
        }
        Ok(p0)
    }

    pub fn nodes(&self) -> &[DgpNode] {
        &self.nodes
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn block_offset(&self, node: usize) -> usize {
        self.offsets[node]
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// State index of `f`.
    pub fn observed_index(&self) -> usize {
        self.offsets[self.top]
    }

    pub fn h_row(&self) -> &DMatrix<f64> {
        &self.h_row
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p0
    }

    /// Replaces the initial covariance.
    pub fn with_p0(mut self, p0: DMatrix<f64>) -> Result<Self> {
        if p0.nrows() != self.dim || p0.ncols() != self.dim {
            return Err(Error::InvalidParameter("P0 has wrong shape".into()));
        }
        self.p0 = p0;
        Ok(self)
    }

    /// True when no coefficient depends on the state (an LTI system).
    pub fn is_linear(&self) -> bool {
        self.lengthscales.iter().chain(&self.magnitudes).all(|r| matches!(r, Resolved::Fixed(_)))
    }

    /// Drift `Λ(U) U` on a generic scalar type.
    pub(crate) fn drift_generic<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.dim);
        for (i, n) in self.nodes.iter().enumerate() {
            let o = self.offsets[i];
            let alpha = n.smoothness_alpha;
            for j in 0..alpha {
                out.push(u[o + j + 1].clone());
            }
            let inv_l = self.inverse_lengthscale(i, u);
            let sqrt_2nu = (2.0 * (alpha as f64 + 0.5)).sqrt();
            let kappa = inv_l.scale(sqrt_2nu);
            // -Σ_m C(α+1, m) κ^(α+1-m) x_m, evaluated Horner-style in κ
            let coeffs = companion_coefficients(alpha);
            let mut acc = u[o].scale(-coeffs[0]);
            for (m, c) in coeffs.iter().enumerate().skip(1) {
                acc = acc.mul(&kappa).add(&u[o + m].scale(-c));
            }
            out.push(acc.mul(&kappa));
        }
        out
    }

    /// Non-zero diagonal entries of `β(U) βᵀ(U)`, as (state index, value).
    pub(crate) fn diffusion_generic<S: Scalar>(&self, u: &[S]) -> Vec<(usize, S)> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let alpha = n.smoothness_alpha;
            let inv_l = self.inverse_lengthscale(i, u);
            let sigma_sq = match self.magnitudes[i] {
                Resolved::Fixed(v) => u[0].lift(v * v),
                Resolved::Parent(idx, w) => w.square(&u[idx]),
            };
            // σ² Γ(α+1)²/Γ(2α+1) (2κ)^(2α+1), κ = sqrt(2ν)/ℓ
            let two_kappa = inv_l.scale(2.0 * (2.0 * (alpha as f64 + 0.5)).sqrt());
            let mut pow = two_kappa.clone();
            for _ in 0..2 * alpha {
                pow = pow.mul(&two_kappa);
            }
            let val = sigma_sq.mul(&pow).scale(dispersion_constant_sq(alpha));
            out.push((self.offsets[i] + alpha, val));
        }
        out
    }

    fn inverse_lengthscale<S: Scalar>(&self, node: usize, u: &[S]) -> S {
        match self.lengthscales[node] {
            Resolved::Fixed(v) => u[0].lift(1.0 / v),
            Resolved::Parent(idx, w) => w.reciprocal(&u[idx]),
        }
    }

    /// `Λ(U) U`.
    pub fn joint_drift(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.drift_generic(u.as_slice()))
    }

    /// `β(U)` as a ϱ×ϱ matrix with each node's dispersion vector in its block's last column.
    pub fn joint_dispersion(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let mut beta = DMatrix::zeros(self.dim, self.dim);
        for (idx, var) in self.diffusion_generic(u.as_slice()) {
            beta[(idx, idx)] = var.max(0.0).sqrt();
        }
        beta
    }

    pub fn initial_condition(&self) -> GaussianBelief {
        GaussianBelief::new(DVector::zeros(self.dim), self.p0.clone())
    }

    /// Wrapped lengthscale and magnitude of every node at state `u`.
    pub fn node_parameters(&self, u: &DVector<f64>) -> Vec<(f64, f64)> {
        (0..self.nodes.len())
            .map(|i| {
                let eval = |r: Resolved| match r {
                    Resolved::Fixed(v) => v,
                    Resolved::Parent(idx, w) => wrap(w, u[idx]).value,
                };
                (eval(self.lengthscales[i]), eval(self.magnitudes[i]))
            })
            .collect()
    }
}

/// A simulated prior path on an output grid.
#[derive(Debug, Clone)]
pub struct PriorSample {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl PriorSample {
    /// First state component of `node` along the path.
    pub fn node_trajectory(&self, model: &DgpModel, node: usize) -> Vec<f64> {
        let o = model.block_offset(node);
        self.states.iter().map(|s| s[o]).collect()
    }
}

/// Draws one prior path. `substeps` discretization steps are taken between consecutive
/// grid points; when `initial` is `None` the path starts from `N(0, P0)`.
pub fn sample_prior(
    model: &DgpModel,
    grid: &[f64],
    substeps: usize,
    scheme: Scheme,
    seed: u64,
    initial: Option<&DVector<f64>>,
) -> Result<PriorSample> {
    if grid.is_empty() {
        return Ok(PriorSample { times: vec![], states: vec![] });
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidData("time grid must be strictly increasing".into()));
    }
    let substeps = substeps.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.state_dim();
    let mut state = match initial {
        Some(x) => x.clone(),
        None => {
            let s = psd_factor(model.p0());
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            s * z
        }
    };
    let mut fine_steps = Vec::new();
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        fine_steps.extend(std::iter::repeat_n(h, substeps));
    }
    let transitions = TransitionSet::new(model, scheme, fine_steps.iter().copied())?;

    let mut states = Vec::with_capacity(grid.len());
    states.push(state.clone());
    for (seg, w) in grid.windows(2).enumerate() {
        let h = (w[1] - w[0]) / substeps as f64;
        let tr = transitions.get(h);
        for sub in 0..substeps {
            let m = tr.repaired_moments(&state);
            let s = psd_factor(&m.cov);
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            state = m.mean + s * z;
            if !state.iter().all(|v| v.is_finite()) {
                return Err(Error::PriorBlowUp(w[0] + h * (sub + 1) as f64));
            }
        }
        let _ = seg;
        states.push(state.clone());
    }
    Ok(PriorSample { times: grid.to_vec(), states })
}
