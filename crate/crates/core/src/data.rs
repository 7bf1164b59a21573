use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurements `y_k = f(t_k) + r_k`, `r_k ~ N(0, R_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesData {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub noise_var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
}

impl TimeSeriesData {
    pub fn new(times: Vec<f64>, y: Vec<f64>, noise_var: Vec<f64>, truth: Option<Vec<f64>>) -> Result<Self> {
        let d = Self { times, y, noise_var, truth };
        d.validate()?;
        Ok(d)
    }

    pub fn with_constant_noise(times: Vec<f64>, y: Vec<f64>, noise_var: f64) -> Result<Self> {
        let n = times.len();
        Self::new(times, y, vec![noise_var; n], None)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.y.len() != n || self.noise_var.len() != n {
            return Err(Error::InvalidData("times, y and noise variances differ in length".into()));
        }
        if let Some(t) = &self.truth {
            if t.len() != n {
                return Err(Error::InvalidData("truth length differs from times".into()));
            }
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidData(format!("times not strictly increasing at index {}", i + 1)));
        }
        if self.times.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite time or measurement".into()));
        }
        if self.noise_var.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::InvalidData("noise variances must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Start time of the state trajectory: one average spacing before the first measurement.
    pub fn default_t0(&self) -> f64 {
        match self.times.len() {
            0 => 0.0,
            1 => self.times[0] - 1.0,
            _ => self.times[0] - (self.times[1] - self.times[0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub t: f64,
    pub obs: Option<Observation>,
    /// Index into the originating data set for measurement steps.
    pub data_index: Option<usize>,
}

/// Time points visited by a filter, starting after `t0` where the prior is placed.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub t0: f64,
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn from_data(data: &TimeSeriesData) -> Self {
        Self::from_data_with_t0(data, data.default_t0())
    }

    pub fn from_data_with_t0(data: &TimeSeriesData, t0: f64) -> Self {
        let steps = (0..data.len())
            .map(|k| Step {
                t: data.times[k],
                obs: Some(Observation { y: data.y[k], noise_var: data.noise_var[k] }),
                data_index: Some(k),
            })
            .collect();
        Self { t0, steps }
    }

    /// Adds prediction-only steps at multiples of `spacing` strictly between consecutive
    /// measurements (relative to the earlier one).
    pub fn with_interpolation(data: &TimeSeriesData, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidParameter("interpolation spacing must be positive".into()));
        }
        let base = Self::from_data(data);
        let mut steps = Vec::with_capacity(base.steps.len());
        for (k, s) in base.steps.iter().enumerate() {
            steps.push(*s);
            if let Some(next) = base.steps.get(k + 1) {
                let mut j = 1;
                loop {
                    let t = s.t + spacing * j as f64;
                    // guard against a point numerically on top of the next measurement
                    if t >= next.t - 1e-9 * spacing {
                        break;
                    }
                    steps.push(Step { t, obs: None, data_index: None });
                    j += 1;
                }
            }
        }
        Ok(Self { t0: base.t0, steps })
    }

    /// Prediction-only schedule over a grid.
    pub fn prediction_only(t0: f64, times: &[f64]) -> Self {
        let steps = times.iter().map(|&t| Step { t, obs: None, data_index: None }).collect();
        Self { t0, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step sizes `t_k - t_{k-1}`, with `t_0` the schedule origin.
    pub fn step_sizes(&self) -> Vec<f64> {
        let mut prev = self.t0;
        self.steps
            .iter()
            .map(|s| {
                let dt = s.t - prev;
                prev = s.t;
                dt
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_sizes().iter().any(|dt| !(*dt > 0.0)) {
            return Err(Error::InvalidData("schedule times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn measurement_count(&self) -> usize {
        self.steps.iter().filter(|s| s.obs.is_some()).count()
    }
}
