//! Synthetic image features with known compositional structure.
//!
//! Each state and each object owns a unit-norm latent direction; a sample of
//! pair `(s, o)` is `normalize(latent_state[s] + latent_object[o] + noise)`.
//! Samples are seeded counter-style from `(dataset seed, pair, sample id)`,
//! so any single sample can be regenerated without touching the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::space::{CompositionSpace, PairId, Split};

// ── Seed derivation ─────────────────────────────────────────────────────────

/// Stable 64-bit mix of a seed and two counters (splitmix64 finalizer).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct RNG stream ids, all derived from one experiment seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const LATENTS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

/// RNG for a named concern under a global seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, 0))
}

// ── Generator ───────────────────────────────────────────────────────────────

/// Frozen latent directions behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub d_in: usize,
    /// `[n_states, d_in]`, each row unit norm.
    pub latent_states: Vec<Vec<f64>>,
    /// `[n_objects, d_in]`, each row unit norm.
    pub latent_objects: Vec<Vec<f64>>,
}

/// Draw unit-norm latent directions for every state and object.
pub fn build_generator(space: &CompositionSpace, d_in: usize, seed: u64) -> Result<GeneratorSpec> {
    if d_in < 8 {
        return Err(Error::Config(format!("latent width must be at least 8, got {d_in}")));
    }
    let mut rng = stream_rng(seed, streams::LATENTS);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw_rows = |count: usize| -> Result<Vec<Vec<f64>>> {
        (0..count)
            .map(|_| {
                let row: Vec<f64> = (0..d_in).map(|_| normal.sample(&mut rng)).collect();
                normalize(row)
            })
            .collect()
    };
    Ok(GeneratorSpec {
        d_in,
        latent_states: draw_rows(space.n_states())?,
        latent_objects: draw_rows(space.n_objects())?,
    })
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateInput("cannot normalize a near-zero vector".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(v)
}

/// One synthetic feature vector for `(pair, sample_id)` under `seed`.
pub fn synthesize_sample(
    gen: &GeneratorSpec,
    space: &CompositionSpace,
    pair: PairId,
    sample_id: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let s = space.state_of(pair);
    let o = space.object_of(pair);
    let mut x: Vec<f64> = gen.latent_states[s]
        .iter()
        .zip(gen.latent_objects[o].iter())
        .map(|(a, b)| a + b)
        .collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, pair as u64, sample_id as u64));
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in x.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    normalize(x)
}

// ── Dataset ─────────────────────────────────────────────────────────────────

/// A labeled feature vector.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub pair: PairId,
    pub features: Vec<f64>,
}

/// Fully materialized features for every sample slot of a split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub d_in: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generate features for every sample id the split lays out.
pub fn materialize_dataset(
    space: &CompositionSpace,
    split: &Split,
    gen: &GeneratorSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let fill = |refs: &[crate::space::SampleRef]| -> Result<Vec<Sample>> {
        refs.iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id,
                    pair: r.pair,
                    features: synthesize_sample(gen, space, r.pair, r.id, noise_sigma, seed)?,
                })
            })
            .collect()
    };
    Ok(Dataset {
        d_in: gen.d_in,
        train: fill(&split.train)?,
        val: fill(&split.val)?,
        test: fill(&split.test)?,
    })
}

/// Nearest-latent-sum reference classifier: score every candidate pair by the
/// dot product with its normalized latent sum, highest wins, ties to the
/// lowest pair id. Training-free, so it bounds what the structure supports.
pub fn oracle_predict(
    gen: &GeneratorSpec,
    space: &CompositionSpace,
    features: &[f64],
    candidates: &[PairId],
) -> Result<PairId> {
    if candidates.is_empty() {
        return Err(Error::DegenerateInput("oracle over an empty candidate set".into()));
    }
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &pair in candidates {
        let s = space.state_of(pair);
        let o = space.object_of(pair);
        let proto = normalize(
            gen.latent_states[s]
                .iter()
                .zip(gen.latent_objects[o].iter())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        let score: f64 = proto.iter().zip(features.iter()).map(|(a, b)| a * b).sum();
        if score > best.0 || (score == best.0 && pair < best.1) {
            best = (score, pair);
        }
    }
    Ok(best.1)
}

/// Oracle accuracy over a sample list.
pub fn oracle_accuracy(
    gen: &GeneratorSpec,
    space: &CompositionSpace,
    samples: &[Sample],
    candidates: &[PairId],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("oracle accuracy over an empty sample list".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if oracle_predict(gen, space, &s.features, candidates)? == s.pair {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

// ── Serialization ───────────────────────────────────────────────────────────

const DATASET_MAGIC: &str = "mfsb-dataset v1";

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_from_hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Format(format!("bad f64 hex field {s:?}: {e}")))
}

/// Text table for a dataset: a header line, then one line per sample with
/// id, state, object, split and the raw feature bits in hex. Bit-exact under
/// round-trip.
pub fn write_dataset(
    dataset: &Dataset,
    space: &CompositionSpace,
    noise_sigma: f64,
    seed: u64,
) -> String {
    let n = dataset.train.len() + dataset.val.len() + dataset.test.len();
    let mut out = format!(
        "{DATASET_MAGIC}\nn {n} d_in {} sigma {} seed {seed}\n",
        dataset.d_in,
        f64_to_hex(noise_sigma)
    );
    for (split, samples) in [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)] {
        for s in samples {
            out.push_str(&format!(
                "{} {} {} {split}",
                s.id,
                space.states[space.state_of(s.pair)],
                space.objects[space.object_of(s.pair)]
            ));
            for v in &s.features {
                out.push(' ');
                out.push_str(&f64_to_hex(*v));
            }
            out.push('\n');
        }
    }
    out
}

/// One parsed row of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub id: usize,
    pub state: String,
    pub object: String,
    pub split: String,
    pub features: Vec<f64>,
}

/// Parsed header and rows of a dataset file.
#[derive(Clone, Debug)]
pub struct DatasetFile {
    pub d_in: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub rows: Vec<DatasetRow>,
}

pub fn read_dataset(text: &str) -> Result<DatasetFile> {
    let mut lines = text.lines();
    match lines.next() {
        Some(DATASET_MAGIC) => {}
        other => return Err(Error::Format(format!("expected {DATASET_MAGIC:?}, got {other:?}"))),
    }
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("missing dataset header line".into()))?
        .split_ascii_whitespace()
        .collect();
    let [_, n, _, d_in, _, sigma, _, seed] = header.as_slice() else {
        return Err(Error::Format(format!("malformed dataset header: {header:?}")));
    };
    let n: usize = n.parse().map_err(|e| Error::Format(format!("bad sample count: {e}")))?;
    let d_in: usize = d_in.parse().map_err(|e| Error::Format(format!("bad d_in: {e}")))?;
    let noise_sigma = f64_from_hex(sigma)?;
    let seed: u64 = seed.parse().map_err(|e| Error::Format(format!("bad seed: {e}")))?;
    let mut rows = Vec::with_capacity(n);
    for line in lines {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 4 + d_in {
            return Err(Error::Format(format!(
                "dataset row has {} fields, expected {}",
                fields.len(),
                4 + d_in
            )));
        }
        rows.push(DatasetRow {
            id: fields[0].parse().map_err(|e| Error::Format(format!("bad sample id: {e}")))?,
            state: fields[1].to_string(),
            object: fields[2].to_string(),
            split: fields[3].to_string(),
            features: fields[4..].iter().map(|f| f64_from_hex(f)).collect::<Result<_>>()?,
        });
    }
    if rows.len() != n {
        return Err(Error::Format(format!("dataset declares {n} samples but has {}", rows.len())));
    }
    Ok(DatasetFile { d_in, noise_sigma, seed, rows })
}
