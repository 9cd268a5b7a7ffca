//! The Wiener-Hammerstein system class `G1 -> F -> G2` and its input signals.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastmath;
use crate::lti::{LtiBlock, LtiClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// One-hidden-layer scalar network `F(x) = W2 act(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticNonlin {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub activation: Activation,
}

impl StaticNonlin {
    /// Kaiming-scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, hidden: usize, activation: Activation) -> Self {
        let s1 = 2.0f64.sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        let w1 = (0..hidden)
            .map(|_| s1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w2 = (0..hidden)
            .map(|_| s2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        StaticNonlin {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
            activation,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.eval_many(&[x], &mut out);
        out[0]
    }

    /// Elementwise `F` over `xs`; identical to calling [`Self::eval`] per element.
    pub fn eval_many(&self, xs: &[f64], out: &mut [f64]) {
        assert_eq!(xs.len(), out.len(), "eval_many length mismatch");
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { self.eval_many_avx2(xs, out) };
            return;
        }
        self.eval_many_generic(xs, out);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn eval_many_avx2(&self, xs: &[f64], out: &mut [f64]) {
        self.eval_many_generic(xs, out);
    }

    #[inline(always)]
    fn eval_many_generic(&self, xs: &[f64], out: &mut [f64]) {
        out.fill(self.b2);
        for ((&w1, &b1), &w2) in self.w1.iter().zip(&self.b1).zip(&self.w2) {
            match self.activation {
                Activation::Tanh => {
                    for (o, &x) in out.iter_mut().zip(xs) {
                        *o += w2 * fastmath::tanh(w1 * x + b1);
                    }
                }
                Activation::Relu => {
                    for (o, &x) in out.iter_mut().zip(xs) {
                        *o += w2 * (w1 * x + b1).max(0.0);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// One affine map per system, calibrated once and reused for every sequence.
    PerSystem,
    /// Each generated sequence is standardized by its own noiseless statistics.
    PerSequence,
}

/// Distribution over Wiener-Hammerstein systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhClass {
    pub lti: LtiClass,
    pub hidden: usize,
    pub activation: Activation,
    pub noise_std: f64,
    /// Standard-normal samples run through the system before every sequence.
    pub burn_in: usize,
    /// Length of the noiseless white-noise run that fixes the standardization.
    pub calib_len: usize,
    pub standardization: Standardization,
    pub max_attempts: usize,
}

impl Default for WhClass {
    fn default() -> Self {
        WhClass {
            lti: LtiClass::default(),
            hidden: 32,
            activation: Activation::Tanh,
            noise_std: 0.1,
            burn_in: 200,
            calib_len: 10_000,
            standardization: Standardization::PerSystem,
            max_attempts: 8,
        }
    }
}

impl WhClass {
    pub fn validate(&self) -> Result<()> {
        self.lti.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("class.hidden must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "class.noise_std must be a non-negative real, got {}",
                self.noise_std
            )));
        }
        if self.calib_len < 2 {
            return Err(Error::Config("class.calib_len must be at least 2".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("class.max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Input signal family; the length is supplied per sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSignal {
    pub kind: SignalKind,
    /// Samples per PRBS level.
    pub prbs_hold: usize,
    /// PRBS levels are `+amplitude` and `-amplitude`.
    pub amplitude: f64,
}

impl Default for InputSignal {
    fn default() -> Self {
        InputSignal {
            kind: SignalKind::WhiteGaussian,
            prbs_hold: 5,
            amplitude: 1.0,
        }
    }
}

impl InputSignal {
    pub fn prbs() -> Self {
        InputSignal {
            kind: SignalKind::Prbs,
            ..Self::default()
        }
    }

    pub fn with_length(&self, length: usize) -> SignalSpec {
        SignalSpec {
            kind: self.kind,
            length,
            prbs_hold: self.prbs_hold,
            amplitude: self.amplitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prbs_hold == 0 {
            return Err(Error::Config("input.prbs_hold must be at least 1".into()));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::Config("input.amplitude must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    WhiteGaussian,
    Prbs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub length: usize,
    pub prbs_hold: usize,
    pub amplitude: f64,
}

/// White Gaussian or PRBS excitation.
pub fn gen_signal<R: Rng + ?Sized>(rng: &mut R, spec: &SignalSpec) -> Vec<f64> {
    match spec.kind {
        SignalKind::WhiteGaussian => (0..spec.length)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        SignalKind::Prbs => {
            let hold = spec.prbs_hold.max(1);
            let mut out = Vec::with_capacity(spec.length);
            while out.len() < spec.length {
                let level = if rng.random::<bool>() {
                    spec.amplitude
                } else {
                    -spec.amplitude
                };
                let n = hold.min(spec.length - out.len());
                out.extend(std::iter::repeat_n(level, n));
            }
            out
        }
    }
}

/// A sampled `G1 -> F -> G2` system with its frozen output standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhSystem {
    pub g1: LtiBlock,
    pub f: StaticNonlin,
    pub g2: LtiBlock,
    pub out_mean: f64,
    pub out_std: f64,
    pub noise_std: f64,
    pub standardization: Standardization,
}

const RECORD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WhRecord {
    version: u32,
    system: WhSystem,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Samples a system and calibrates its standardization on a noiseless
/// white-noise run of `cfg.calib_len` samples.
pub fn sample_wh<R: Rng + ?Sized>(rng: &mut R, cfg: &WhClass) -> Result<WhSystem> {
    cfg.validate()?;
    for _ in 0..cfg.max_attempts {
        let g1 = cfg.lti.sample(rng)?;
        let f = StaticNonlin::sample(rng, cfg.hidden, cfg.activation);
        let g2 = cfg.lti.sample(rng)?;
        let mut sys = WhSystem {
            g1,
            f,
            g2,
            out_mean: 0.0,
            out_std: 1.0,
            noise_std: cfg.noise_std,
            standardization: cfg.standardization,
        };
        let u: Vec<f64> = (0..cfg.calib_len).map(|_| normal(rng)).collect();
        let raw = sys.raw_output(&u, rng, cfg.burn_in)?;
        let (mean, std) = mean_std(&raw);
        if std.is_finite() && std > 1e-6 {
            sys.out_mean = mean;
            sys.out_std = std;
            return Ok(sys);
        }
    }
    Err(Error::Sampling(format!(
        "no non-degenerate system after {} attempts",
        cfg.max_attempts
    )))
}

/// Noiseless and measured output of one simulation.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

impl WhSystem {
    /// Unstandardized `G2(F(G1(u)))` after `burn_in` random input samples,
    /// starting from zero filter state.
    fn raw_output<R: Rng + ?Sized>(&self, u: &[f64], rng: &mut R, burn_in: usize) -> Result<Vec<f64>> {
        let mut x: Vec<f64> = (0..burn_in).map(|_| normal(rng)).collect();
        x.extend_from_slice(u);
        let check = |v: &[f64], stage: &'static str| -> Result<()> {
            match v.iter().position(|y| !y.is_finite()) {
                Some(i) => Err(Error::Simulation {
                    stage,
                    msg: format!("non-finite output at step {i}"),
                }),
                None => Ok(()),
            }
        };
        let mut g1 = self.g1.clone();
        g1.reset();
        let a: Vec<f64> = x.iter().map(|&v| g1.step(v)).collect();
        check(&a, "G1")?;
        self.f.eval_many(&a, &mut x);
        check(&x, "F")?;
        let mut g2 = self.g2.clone();
        g2.reset();
        let mut y: Vec<f64> = x.iter().map(|&v| g2.step(v)).collect();
        check(&y, "G2")?;
        y.drain(..burn_in);
        Ok(y)
    }

    /// Standardized output for input `u`, plus `N(0, noise_std^2)` noise when
    /// `add_noise`. The burn-in draws come from `rng` before any noise draw.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        u: &[f64],
        rng: &mut R,
        add_noise: bool,
        burn_in: usize,
    ) -> Result<Vec<f64>> {
        let out = self.simulate_detailed(u, rng, add_noise, burn_in)?;
        Ok(if add_noise { out.noisy } else { out.clean })
    }

    pub fn simulate_detailed<R: Rng + ?Sized>(
        &self,
        u: &[f64],
        rng: &mut R,
        add_noise: bool,
        burn_in: usize,
    ) -> Result<SimOutput> {
        if let Some(i) = u.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite system input at index {i}")));
        }
        let raw = self.raw_output(u, rng, burn_in)?;
        let (mean, std) = match self.standardization {
            PerSystem => (self.out_mean, self.out_std),
            PerSequence if raw.len() >= 2 => {
                let (m, s) = mean_std(&raw);
                (m, if s > 1e-12 { s } else { 1.0 })
            }
            PerSequence => (self.out_mean, self.out_std),
        };
        let clean: Vec<f64> = raw.iter().map(|y| (y - mean) / std).collect();
        let noisy = if add_noise {
            clean
                .iter()
                .map(|y| y + self.noise_std * normal(rng))
                .collect()
        } else {
            clean.clone()
        };
        Ok(SimOutput { clean, noisy })
    }

    /// Versioned JSON record of the system.
    pub fn to_record(&self) -> String {
        serde_json::to_string(&WhRecord {
            version: RECORD_VERSION,
            system: self.clone(),
        })
        .expect("system record serializes")
    }

    pub fn from_record(s: &str) -> Result<Self> {
        let rec: WhRecord = serde_json::from_str(s)
            .map_err(|e| Error::Validation(format!("bad system record: {e}")))?;
        if rec.version != RECORD_VERSION {
            return Err(Error::Validation(format!(
                "system record version {} is not supported",
                rec.version
            )));
        }
        let mut sys = rec.system;
        sys.g1.reset();
        sys.g2.reset();
        Ok(sys)
    }
}

use Standardization::{PerSequence, PerSystem};
