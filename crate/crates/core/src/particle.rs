//! Bootstrap particle filter and backward-simulation particle smoother.
//!
//! Every random draw comes from a ChaCha stream keyed by (seed, step, particle), so results
//! do not depend on how rayon schedules the work.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::Schedule;
use crate::discretize::{DiscretizedTransition, TransitionSet, COV_FLOOR_REL};
use crate::error::{Error, Result};
use crate::graph::DgpModel;
use crate::linalg::{floor_eigenvalues, log_normal_scalar, log_sum_exp, psd_factor};

/// Weighted particle approximation of a filtering distribution.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub t: f64,
    pub particles: Vec<DVector<f64>>,
    /// Normalized so that `Σ exp(log_weights) = 1`.
    pub log_weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleCloud {
    fn new(t: f64, particles: Vec<DVector<f64>>, log_weights: Vec<f64>) -> Self {
        let lse = log_sum_exp(&log_weights);
        let log_weights: Vec<f64> = log_weights.iter().map(|w| w - lse).collect();
        let ess = 1.0 / log_weights.iter().map(|w| (2.0 * w).exp()).sum::<f64>();
        Self { t, particles, log_weights, ess }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.particles[0].len());
        for (p, w) in self.particles.iter().zip(self.weights()) {
            m += p * w;
        }
        m
    }

    /// Weighted mean and variance of one state component.
    pub fn component_moments(&self, idx: usize) -> (f64, f64) {
        let w = self.weights();
        let mean: f64 = self.particles.iter().zip(&w).map(|(p, w)| w * p[idx]).sum();
        let var: f64 = self.particles.iter().zip(&w).map(|(p, w)| w * (p[idx] - mean).powi(2)).sum();
        (mean, var)
    }
}

#[derive(Debug, Clone)]
pub struct PfOutput {
    /// Index 0 holds the initial cloud at the schedule origin.
    pub clouds: Vec<ParticleCloud>,
    pub log_likelihood: f64,
    pub resample_count: usize,
    /// Per-step one-step predictive log densities of the measurements.
    pub log_pred: Vec<Option<f64>>,
    /// Per-step predictive mean and variance of `f` (before weighting).
    pub pred_f: Vec<(f64, f64)>,
    seed: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, step: u64, particle: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, step, particle))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Systematic resampling: `count` indices from one uniform offset.
pub fn systematic_indices(weights: &[f64], count: usize, offset: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut cum = weights[0] / total;
    let mut i = 0;
    for j in 0..count {
        let u = (j as f64 + offset) / count as f64;
        while u > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

pub fn systematic_resample(log_weights: &[f64], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ParticleDegeneracy(0));
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    Ok(systematic_indices(&w, count, rng.random::<f64>()))
}

/// Transition mean and a floored covariance factor for density evaluation.
/// Gaussian transition density with its factor and normalizing constant precomputed.
struct Kernel {
    mean: DVector<f64>,
    lower: DMatrix<f64>,
    log_norm: f64,
}

impl Kernel {
    fn new(mean: DVector<f64>, chol: Cholesky<f64, Dyn>) -> Self {
        let lower = chol.l();
        let n = mean.len() as f64;
        let log_det: f64 = lower.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Kernel { mean, lower, log_norm: -0.5 * (log_det + n * (2.0 * std::f64::consts::PI).ln()) }
    }

    /// Log density at `x`. `scratch` avoids allocation.
    fn log_pdf(&self, x: &DVector<f64>, scratch: &mut Vec<f64>) -> f64 {
        let n = self.mean.len();
        scratch.clear();
        let mut maha = 0.0;
        for i in 0..n {
            let mut v = x[i] - self.mean[i];
            for (j, zj) in scratch.iter().enumerate() {
                v -= self.lower[(i, j)] * zj;
            }
            let z = v / self.lower[(i, i)];
            maha += z * z;
            scratch.push(z);
        }
        self.log_norm - 0.5 * maha
    }
}

fn floored_cholesky(q: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    let f = floor_eigenvalues(q, COV_FLOOR_REL);
    let mut m = f.matrix;
    if m.trace() == 0.0 {
        // degenerate (zero-noise) transitions still need a finite density
        m += DMatrix::identity(m.nrows(), m.ncols()) * f64::EPSILON;
    }
    Cholesky::new(m.clone())
        .or_else(|| Cholesky::new(&m + DMatrix::identity(m.nrows(), m.ncols()) * (m.trace() * 1e-10)))
        .expect("floored covariance factorizes")
}

fn kernel(tr: &DiscretizedTransition, x: &DVector<f64>) -> Kernel {
    let m = tr.moments(x);
    Kernel::new(m.mean, floored_cholesky(&m.cov))
}

pub fn bootstrap_pf(
    model: &DgpModel,
    transitions: &TransitionSet,
    schedule: &Schedule,
    num_particles: usize,
    seed: u64,
) -> Result<PfOutput> {
    if num_particles < 2 {
        return Err(Error::InvalidParameter("particle filter needs at least two particles".into()));
    }
    schedule.validate()?;
    let n = model.state_dim();
    let fi = model.observed_index();
    let p0 = psd_factor(model.p0());
    let initial: Vec<DVector<f64>> = (0..num_particles)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, 0, i as u64);
            &p0 * normal_vec(&mut rng, n)
        })
        .collect();
    let mut clouds = vec![ParticleCloud::new(schedule.t0, initial, vec![0.0; num_particles])];
    let mut out_ll = 0.0;
    let mut resample_count = 0;
    let mut log_pred = Vec::with_capacity(schedule.len());
    let mut pred_f = Vec::with_capacity(schedule.len());

    for (k, (step, dt)) in schedule.steps.iter().zip(schedule.step_sizes()).enumerate() {
        let tr = transitions
            .try_get(dt)
            .ok_or_else(|| Error::InvalidParameter(format!("no transition prepared for step {dt}")))?;
        let prev = clouds.last().expect("initial cloud");
        let step_id = k as u64 + 1;
        let (ancestors, prior_logw): (Vec<usize>, Vec<f64>) = if prev.ess < num_particles as f64 / 2.0 {
            resample_count += 1;
            let mut rng = stream(seed, step_id, u64::MAX);
            let idx = systematic_resample(&prev.log_weights, num_particles, &mut rng)
                .map_err(|_| Error::ParticleDegeneracy(k))?;
            (idx, vec![-(num_particles as f64).ln(); num_particles])
        } else {
            ((0..num_particles).collect(), prev.log_weights.clone())
        };

        let affine = tr.affine().map(|(phi, q)| (phi.clone(), psd_factor(q)));
        let propagated: Vec<DVector<f64>> = ancestors
            .par_iter()
            .enumerate()
            .map(|(i, &a)| {
                let mut rng = stream(seed, step_id, i as u64);
                let x = &prev.particles[a];
                let z = normal_vec(&mut rng, n);
                match &affine {
                    Some((phi, s)) => phi * x + s * z,
                    None => {
                        let m = tr.repaired_moments(x);
                        m.mean + psd_factor(&m.cov) * z
                    }
                }
            })
            .collect();
        if propagated.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::ParticleDegeneracy(k));
        }
        let (fm, fv) = {
            let w: Vec<f64> = prior_logw.iter().map(|l| l.exp()).collect();
            let tot: f64 = w.iter().sum();
            let m: f64 = propagated.iter().zip(&w).map(|(p, w)| w * p[fi]).sum::<f64>() / tot;
            let v: f64 = propagated.iter().zip(&w).map(|(p, w)| w * (p[fi] - m).powi(2)).sum::<f64>() / tot;
            (m, v)
        };
        pred_f.push((fm, fv));

        let logw: Vec<f64> = match step.obs {
            Some(obs) => {
                let lik: Vec<f64> = propagated
                    .iter()
                    .map(|p| {
                        if obs.noise_var > 0.0 {
                            log_normal_scalar(obs.y, p[fi], obs.noise_var)
                        } else if p[fi] == obs.y {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let combined: Vec<f64> = prior_logw.iter().zip(&lik).map(|(a, b)| a + b).collect();
                let inc = log_sum_exp(&combined) - log_sum_exp(&prior_logw);
                if !inc.is_finite() {
                    return Err(Error::ParticleDegeneracy(k));
                }
                out_ll += inc;
                log_pred.push(Some(inc));
                combined
            }
            None => {
                log_pred.push(None);
                prior_logw
            }
        };
        clouds.push(ParticleCloud::new(step.t, propagated, logw));
    }
    Ok(PfOutput { clouds, log_likelihood: out_ll, resample_count, log_pred, pred_f, seed })
}

impl PfOutput {
    pub fn steps(&self) -> usize {
        self.clouds.len() - 1
    }
}

/// State trajectories drawn from the smoothing distribution, one vector per schedule point
/// (origin included).
pub type Trajectory = Vec<DVector<f64>>;

pub fn backward_simulation_smoother(
    pf_out: &PfOutput,
    transitions: &TransitionSet,
    schedule: &Schedule,
    num_trajectories: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let steps = pf_out.steps();
    if steps != schedule.len() {
        return Err(Error::InvalidParameter("particle output does not match the schedule".into()));
    }
    let dts = schedule.step_sizes();
    let seed = mix(seed, pf_out.seed, 0xB5);
    let last = &pf_out.clouds[steps];
    let last_weights = last.weights();
    let mut current: Vec<usize> = (0..num_trajectories)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, steps as u64, j as u64);
            systematic_indices(&last_weights, 1, rng.random::<f64>())[0]
        })
        .collect();
    let mut states: Vec<Vec<DVector<f64>>> = vec![Vec::new(); steps + 1];
    states[steps] = current.iter().map(|&i| last.particles[i].clone()).collect();

    for k in (0..steps).rev() {
        let cloud = &pf_out.clouds[k];
        let tr = transitions.get(dts[k]);
        let kernels: Vec<Kernel> = match tr.affine() {
            Some((phi, q)) => {
                let chol = floored_cholesky(q);
                cloud.particles.iter().map(|x| Kernel::new(phi * x, chol.clone())).collect()
            }
            None => cloud.particles.par_iter().map(|x| kernel(tr, x)).collect(),
        };
        let next = &states[k + 1];
        let picked: Result<Vec<usize>> = (0..num_trajectories)
            .into_par_iter()
            .map_init(Vec::new, |scratch, j| {
                let target = &next[j];
                let logw: Vec<f64> =
                    kernels.iter().zip(&cloud.log_weights).map(|(kn, lw)| lw + kn.log_pdf(target, scratch)).collect();
                let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::BackwardDegeneracy(k));
                }
                let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
                let mut rng = stream(seed, k as u64, j as u64);
                Ok(systematic_indices(&w, 1, rng.random::<f64>())[0])
            })
            .collect();
        current = picked?;
        states[k] = current.iter().map(|&i| cloud.particles[i].clone()).collect();
    }
    Ok((0..num_trajectories)
        .map(|j| states.iter().map(|s| s[j].clone()).collect())
        .collect())
}

/// Mean over trajectories of one state component at every schedule point.
pub fn trajectory_mean(trajectories: &[Trajectory], idx: usize) -> Vec<f64> {
    if trajectories.is_empty() {
        return Vec::new();
    }
    let len = trajectories[0].len();
    (0..len)
        .map(|k| trajectories.iter().map(|tr| tr[k][idx]).sum::<f64>() / trajectories.len() as f64)
        .collect()
}
