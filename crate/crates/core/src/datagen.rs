//! Synthetic context/query datasets: the training stream and fixed test sets.
//!
//! Every sample owns a ChaCha generator keyed by `(seed, domain, batch, index)`,
//! so a sample is reproducible on its own and batches can be produced in any
//! order or in parallel. Inside a sample, the system, the context simulation and
//! the query simulation draw from three separate ChaCha streams of that key.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::wh::{gen_signal, sample_wh, InputSignal, WhClass, WhSystem};

/// One dataset: a context window and a disjoint query window from one system.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub ctx_u: Vec<f32>,
    pub ctx_y: Vec<f32>,
    pub qry_u: Vec<f32>,
    pub qry_y: Vec<f32>,
    /// The first `n_in` query steps are initial conditions.
    pub n_in: usize,
}

impl DatasetSample {
    pub fn m(&self) -> usize {
        self.ctx_u.len()
    }

    pub fn n(&self) -> usize {
        self.qry_u.len()
    }

    /// Query outputs to be predicted (positions `n_in+1..=N`).
    pub fn targets(&self) -> &[f32] {
        &self.qry_y[self.n_in..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ctx_u.len() != self.ctx_y.len() || self.qry_u.len() != self.qry_y.len() {
            return Err(Error::Validation("input/output lengths differ".into()));
        }
        if self.n_in < 1 || self.n_in >= self.n() {
            return Err(Error::Validation(format!(
                "need 1 <= n_in < N, got n_in={} N={}",
                self.n_in,
                self.n()
            )));
        }
        Ok(())
    }
}

/// What the generator knows but a sample does not carry.
#[derive(Clone, Debug)]
pub struct SampleTruth {
    pub system: WhSystem,
    pub ctx_clean: Vec<f32>,
    pub qry_clean: Vec<f32>,
}

/// Stacked samples with identical `(m, N, n_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    samples: Vec<DatasetSample>,
}

impl Minibatch {
    pub fn new(samples: Vec<DatasetSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("a minibatch needs at least one sample".into()))?;
        let key = (first.m(), first.n(), first.n_in);
        for s in &samples {
            s.validate()?;
            if (s.m(), s.n(), s.n_in) != key {
                return Err(Error::Validation(format!(
                    "heterogeneous minibatch: (m, N, n_in) {:?} vs {:?}",
                    (s.m(), s.n(), s.n_in),
                    key
                )));
            }
        }
        Ok(Minibatch { samples })
    }

    pub fn samples(&self) -> &[DatasetSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<DatasetSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn m(&self) -> usize {
        self.samples[0].m()
    }

    pub fn n(&self) -> usize {
        self.samples[0].n()
    }

    pub fn n_in(&self) -> usize {
        self.samples[0].n_in
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Context length.
    pub m: usize,
    /// Query length, initial conditions included.
    #[serde(rename = "n")]
    pub n: usize,
    pub n_in: usize,
    /// Minibatch size.
    pub b: usize,
    pub seed: u64,
    pub input: InputSignal,
    pub class: WhClass,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            m: 400,
            n: 110,
            n_in: 10,
            b: 32,
            seed: 0,
            input: InputSignal::default(),
            class: WhClass::default(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("stream.m must be at least 1".into()));
        }
        if self.n_in < 1 || self.n <= self.n_in {
            return Err(Error::Config(format!(
                "stream needs 1 <= n_in < n, got n_in={} n={}",
                self.n_in, self.n
            )));
        }
        if self.b < 1 {
            return Err(Error::Config("stream.b must be at least 1".into()));
        }
        self.input.validate()?;
        self.class.validate()
    }
}

/// Generator domains keep the training stream and test sets apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Train = 0,
    TestSet = 1,
    Dropout = 2,
}

/// Generator for sample `index` of batch `batch`.
pub fn sample_rng(seed: u64, domain: Domain, batch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&batch.to_le_bytes());
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const STREAM_SYSTEM: u64 = 1;
const STREAM_CONTEXT: u64 = 2;
const STREAM_QUERY: u64 = 3;

fn substream(key: [u8; 32], stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::from_seed(key);
    r.set_stream(stream);
    r
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Draws one dataset: a fresh system, a context simulation of length `m` and an
/// independent query simulation of length `N`, each with its own burn-in.
pub fn sample_dataset(rng: &mut ChaCha8Rng, cfg: &StreamConfig) -> Result<DatasetSample> {
    Ok(sample_dataset_with_truth(rng, cfg)?.0)
}

pub fn sample_dataset_with_truth(
    rng: &mut ChaCha8Rng,
    cfg: &StreamConfig,
) -> Result<(DatasetSample, SampleTruth)> {
    cfg.validate()?;
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    let system = sample_wh(&mut substream(key, STREAM_SYSTEM), &cfg.class)?;

    let simulate = |len: usize, stream: u64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut r = substream(key, stream);
        let u = gen_signal(&mut r, &cfg.input.with_length(len));
        let out = system.simulate_detailed(&u, &mut r, true, cfg.class.burn_in)?;
        Ok((u, out.noisy, out.clean))
    };
    let (cu, cy, cc) = simulate(cfg.m, STREAM_CONTEXT)?;
    let (qu, qy, qc) = simulate(cfg.n, STREAM_QUERY)?;
    let sample = DatasetSample {
        ctx_u: to_f32(&cu),
        ctx_y: to_f32(&cy),
        qry_u: to_f32(&qu),
        qry_y: to_f32(&qy),
        n_in: cfg.n_in,
    };
    let truth = SampleTruth {
        system,
        ctx_clean: to_f32(&cc),
        qry_clean: to_f32(&qc),
    };
    Ok((sample, truth))
}

/// Minibatch `batch` of the training stream.
pub fn batch_at(cfg: &StreamConfig, batch: u64) -> Result<Minibatch> {
    cfg.validate()?;
    let samples = (0..cfg.b as u64)
        .into_par_iter()
        .map(|j| sample_dataset(&mut sample_rng(cfg.seed, Domain::Train, batch, j), cfg))
        .collect::<Result<Vec<_>>>()?;
    Minibatch::new(samples)
}

/// Endless iterator over training minibatches.
pub struct BatchStream {
    cfg: StreamConfig,
    next: u64,
}

impl BatchStream {
    /// Positions the stream so the next batch is `index`.
    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    pub fn position(&self) -> u64 {
        self.next
    }
}

impl Iterator for BatchStream {
    type Item = Result<Minibatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = batch_at(&self.cfg, self.next);
        self.next += 1;
        Some(b)
    }
}

pub fn stream_batches(cfg: &StreamConfig) -> Result<BatchStream> {
    cfg.validate()?;
    Ok(BatchStream {
        cfg: cfg.clone(),
        next: 0,
    })
}

/// A fixed, serializable evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub cfg: StreamConfig,
    pub samples: Vec<DatasetSample>,
    /// Noiseless query outputs, when recorded.
    pub qry_clean: Option<Vec<Vec<f32>>>,
}

const TESTSET_MAGIC: &[u8; 4] = b"ICSD";
const TESTSET_VERSION: u16 = 1;

impl TestSet {
    /// Draws `count` samples from the test-set domain of `cfg.seed`.
    pub fn generate(cfg: &StreamConfig, count: usize, keep_clean: bool) -> Result<Self> {
        cfg.validate()?;
        let pairs = (0..count as u64)
            .into_par_iter()
            .map(|i| sample_dataset_with_truth(&mut sample_rng(cfg.seed, Domain::TestSet, 0, i), cfg))
            .collect::<Result<Vec<_>>>()?;
        let (samples, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Ok(TestSet {
            cfg: cfg.clone(),
            samples,
            qry_clean: keep_clean.then(|| truths.into_iter().map(|t| t.qry_clean).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Little-endian layout: magic `ICSD`, `u16` version, length-prefixed JSON
    /// config, `u32` count, `u8` flags (bit 0: noiseless query present), then
    /// per sample `ctx_u[m] ctx_y[m] qry_u[N] qry_y[N] (qry_clean[N])` as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TESTSET_MAGIC);
        w.u16(TESTSET_VERSION);
        w.blob(&serde_json::to_vec(&self.cfg).expect("config serializes"));
        w.u32(self.samples.len() as u32);
        w.u8(u8::from(self.qry_clean.is_some()));
        for (i, s) in self.samples.iter().enumerate() {
            w.f32s(&s.ctx_u);
            w.f32s(&s.ctx_y);
            w.f32s(&s.qry_u);
            w.f32s(&s.qry_y);
            if let Some(c) = &self.qry_clean {
                w.f32s(&c[i]);
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4, "magic")? != TESTSET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a test-set file (bad magic)".into(),
            });
        }
        let version = r.u16("version")?;
        if version != TESTSET_VERSION {
            return Err(r.err(format!(
                "unsupported test-set version {version} (expected {TESTSET_VERSION})"
            )));
        }
        let cfg_bytes = r.blob("config block")?;
        let cfg: StreamConfig = serde_json::from_slice(cfg_bytes)
            .map_err(|e| r.err(format!("bad config block: {e}")))?;
        cfg.validate().map_err(|e| r.err(e.to_string()))?;
        let count = r.u32("sample count")? as usize;
        let flags = r.u8("flags")?;
        let has_clean = flags & 1 == 1;
        let (m, n) = (cfg.m, cfg.n);
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        let mut clean = has_clean.then(Vec::new);
        for i in 0..count {
            let what = format!("sample {i}");
            samples.push(DatasetSample {
                ctx_u: r.f32s(m, &what)?,
                ctx_y: r.f32s(m, &what)?,
                qry_u: r.f32s(n, &what)?,
                qry_y: r.f32s(n, &what)?,
                n_in: cfg.n_in,
            });
            if let Some(c) = &mut clean {
                c.push(r.f32s(n, &what)?);
            }
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        Ok(TestSet {
            cfg,
            samples,
            qry_clean: clean,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }

    /// SHA-256 of the serialized set.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Plain-text dump, one row per time step.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,segment,t,u,y\n");
        for (i, s) in self.samples.iter().enumerate() {
            for (seg, u, y) in [("ctx", &s.ctx_u, &s.ctx_y), ("qry", &s.qry_u, &s.qry_y)] {
                for (t, (uu, yy)) in u.iter().zip(y.iter()).enumerate() {
                    out.push_str(&format!("{i},{seg},{},{uu},{yy}\n", t + 1));
                }
            }
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Generates `count` samples and writes them to `path`.
pub fn write_testset(path: &Path, cfg: &StreamConfig, count: usize) -> Result<TestSet> {
    let set = TestSet::generate(cfg, count, false)?;
    set.write(path)?;
    Ok(set)
}

pub fn read_testset(path: &Path) -> Result<TestSet> {
    TestSet::read(path)
}

/// Writes through a temporary sibling file so readers never see partial data.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
