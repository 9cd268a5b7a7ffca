//! Random stable discrete-time LTI blocks and their exact simulation.
//!
//! A block is the rational transfer function `B(z) / A(z)` realized as the
//! difference equation `y_k = sum_j b_j u_{k-j} - sum_{j>=1} a_j y_{k-j}`
//! (transposed direct form II, state length `max(deg A, deg B)`).

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pole distribution of the LTI blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LtiClass {
    pub order_min: usize,
    pub order_max: usize,
    /// Open interval for pole magnitudes.
    pub mag_min: f64,
    pub mag_max: f64,
    /// Complex-pair phases are drawn from `(0, phase_max)`.
    pub phase_max: f64,
}

impl Default for LtiClass {
    fn default() -> Self {
        LtiClass {
            order_min: 1,
            order_max: 10,
            mag_min: 0.5,
            mag_max: 0.97,
            phase_max: FRAC_PI_2,
        }
    }
}

impl LtiClass {
    pub fn with_orders(order_min: usize, order_max: usize) -> Self {
        LtiClass {
            order_min,
            order_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order_min < 1 || self.order_min > self.order_max {
            return Err(Error::Config(format!(
                "order bounds must satisfy 1 <= order_min <= order_max, got [{}, {}]",
                self.order_min, self.order_max
            )));
        }
        if !(0.0 < self.mag_min && self.mag_min < self.mag_max && self.mag_max < 1.0) {
            return Err(Error::Config(format!(
                "pole magnitudes must satisfy 0 < mag_min < mag_max < 1, got ({}, {})",
                self.mag_min, self.mag_max
            )));
        }
        if !(self.phase_max > 0.0 && self.phase_max < std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "phase_max must lie in (0, pi), got {}",
                self.phase_max
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LtiBlock> {
        self.validate()?;
        let order = rng.random_range(self.order_min..=self.order_max);
        let mut poles = Vec::with_capacity(order);
        for _ in 0..order / 2 {
            let r = open_uniform(rng, self.mag_min, self.mag_max);
            let th = open_uniform(rng, 0.0, self.phase_max);
            let p = Complex64::from_polar(r, th);
            poles.push(p);
            poles.push(p.conj());
        }
        if order % 2 == 1 {
            poles.push(Complex64::new(open_uniform(rng, self.mag_min, self.mag_max), 0.0));
        }
        LtiBlock::from_poles(poles)
    }
}

/// Uniform draw on the open interval `(lo, hi)`.
fn open_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let x = rng.random_range(lo..hi);
        if x > lo {
            return x;
        }
    }
}

/// Samples a block with order uniform on `[order_min, order_max]` and the
/// default pole ranges.
pub fn sample_lti<R: Rng + ?Sized>(rng: &mut R, order_min: usize, order_max: usize) -> Result<LtiBlock> {
    LtiClass::with_orders(order_min, order_max).sample(rng)
}

/// Expands `prod_i (z - p_i)` into real monic coefficients `[1, a_1, ..., a_n]`.
pub fn poles_to_den(poles: &[Complex64]) -> Result<Vec<f64>> {
    check_conjugate_closed(poles)?;
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * p;
        }
        c = next;
    }
    if let Some((i, z)) = c.iter().enumerate().find(|(_, z)| z.im.abs() >= 1e-10) {
        return Err(Error::Validation(format!(
            "coefficient {i} has imaginary residue {:e}",
            z.im
        )));
    }
    Ok(c.iter().map(|z| z.re).collect())
}

fn check_conjugate_closed(poles: &[Complex64]) -> Result<()> {
    let tol = 1e-12;
    let mut used = vec![false; poles.len()];
    for i in 0..poles.len() {
        if used[i] || poles[i].im.abs() <= tol {
            continue;
        }
        used[i] = true;
        let target = poles[i].conj();
        let partner = (0..poles.len())
            .find(|&j| !used[j] && (poles[j] - target).norm() <= tol * (1.0 + target.norm()));
        match partner {
            Some(j) => used[j] = true,
            None => {
                return Err(Error::Validation(format!(
                    "pole {} has no conjugate partner",
                    poles[i]
                )))
            }
        }
    }
    Ok(())
}

/// Stable SISO transfer function with its filter state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiBlock {
    /// Empty for blocks built from raw coefficients.
    poles: Vec<Complex64>,
    num: Vec<f64>,
    den: Vec<f64>,
    #[serde(skip)]
    state: Vec<f64>,
}

impl LtiBlock {
    /// Block with the given poles, no finite zeros, and unit DC gain.
    pub fn from_poles(poles: Vec<Complex64>) -> Result<Self> {
        let den = poles_to_den(&poles)?;
        let gain: f64 = den.iter().sum();
        let mut block = Self::from_coefficients(vec![gain], den)?;
        block.poles = poles;
        Ok(block)
    }

    pub fn from_coefficients(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if den.first() != Some(&1.0) {
            return Err(Error::Validation("denominator must be monic (a_0 = 1)".into()));
        }
        if num.is_empty() {
            return Err(Error::Validation("numerator must have at least one coefficient".into()));
        }
        if num.iter().chain(&den).any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite filter coefficient".into()));
        }
        let n = den.len().max(num.len()) - 1;
        Ok(LtiBlock {
            poles: Vec::new(),
            num,
            den,
            state: vec![0.0; n],
        })
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self) {
        let n = self.den.len().max(self.num.len()) - 1;
        self.state.clear();
        self.state.resize(n, 0.0);
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    /// Filters `u`, carrying state across calls unless `reset` is set.
    pub fn filter(&mut self, u: &[f64], reset: bool) -> Result<Vec<f64>> {
        if let Some(i) = u.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite filter input at index {i}")));
        }
        if reset {
            self.reset();
        }
        Ok(u.iter().map(|&x| self.step(x)).collect())
    }

    /// Advances the filter by one sample.
    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let n = self.state.len();
        let b = |j: usize| self.num.get(j).copied().unwrap_or(0.0);
        let a = |j: usize| self.den.get(j).copied().unwrap_or(0.0);
        if n == 0 {
            return b(0) * x;
        }
        let y = b(0) * x + self.state[0];
        for i in 0..n - 1 {
            self.state[i] = b(i + 1) * x + self.state[i + 1] - a(i + 1) * y;
        }
        self.state[n - 1] = b(n) * x - a(n) * y;
        y
    }

    /// First `len` samples of the impulse response from zero state.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut b = self.clone();
        b.reset();
        (0..len).map(|k| b.step(if k == 0 { 1.0 } else { 0.0 })).collect()
    }
}
