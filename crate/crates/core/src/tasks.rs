//! Deterministic synthetic classification tasks.
//!
//! * `Alignment`: the image rows hold every class prototype once, in a random
//!   slot order, tagged with a slot code. The text names a slot; the label is
//!   the prototype sitting in that slot. Solving it requires routing the
//!   visual lookup by the text.
//! * `Pattern`: constant text; the label is a fixed nonlinear function of the
//!   mean image row. Solving it requires a learned feature transform.
//! * `Memorize`: a handful of random samples to overfit.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qformer::ModelInputs;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Alignment,
    Pattern,
    Memorize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Image feature rows per sample.
    pub n_img: usize,
    pub image_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Standard deviation of additive feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Alignment,
            num_classes: 4,
            n_train: 256,
            n_val: 64,
            n_test: 64,
            n_img: 4,
            image_dim: 16,
            vocab_size: 32,
            text_len: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Eight samples, no held-out splits.
    pub fn memorize(num_classes: usize, image_dim: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Memorize,
            num_classes,
            n_train: 8,
            n_val: 0,
            n_test: 0,
            image_dim,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.n_img == 0 || self.image_dim == 0 {
            return fail("image grid must be non-empty".into());
        }
        if self.n_train == 0 {
            return fail("n_train must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be a finite non-negative number, got {}", self.noise));
        }
        if self.kind == TaskKind::Alignment {
            if self.n_img < self.num_classes {
                return fail(format!(
                    "alignment task needs n_img >= num_classes ({} < {})",
                    self.n_img, self.num_classes
                ));
            }
            if self.text_len < 2 {
                return fail("alignment task needs text_len >= 2".into());
            }
            if self.vocab_size < self.n_img + 1 {
                return fail(format!(
                    "alignment task needs vocab_size >= n_img + 1 ({} < {})",
                    self.vocab_size,
                    self.n_img + 1
                ));
            }
        }
        if self.text_len > 0 && self.vocab_size == 0 {
            return fail("vocab_size must be positive when text is used".into());
        }
        Ok(())
    }
}

pub fn chance_level(spec: &TaskSpec) -> f64 {
    1.0 / spec.num_classes as f64
}

/// One example: `n_img × image_dim` features (row-major), tokens and label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Sample {
    pub fn inputs<T: Real>(&self, n_img: usize, image_dim: usize) -> Result<ModelInputs<T>> {
        let feats = self.features.iter().map(|&v| T::lit(v)).collect();
        ModelInputs::new(n_img, image_dim, feats, self.tokens.clone())
    }

    /// Byte-level content key (used for split-disjointness checks).
    pub fn content_key(&self) -> Vec<u8> {
        let mut key = Vec::with_capacity(8 * (self.features.len() + self.tokens.len() + 1));
        for v in &self.features {
            key.extend(v.to_bits().to_le_bytes());
        }
        for &t in &self.tokens {
            key.extend((t as u64).to_le_bytes());
        }
        key.extend((self.label as u64).to_le_bytes());
        key
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Validation split, falling back to the training split when empty.
    pub fn validation(&self) -> &[Sample] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Fixed per-task quantities shared across splits.
#[derive(Clone, Debug)]
pub struct TaskFrame {
    /// `num_classes × image_dim` class prototypes (alignment).
    pub prototypes: Vec<Vec<f64>>,
    /// `n_img × image_dim` slot codes (alignment).
    pub slot_codes: Vec<Vec<f64>>,
    /// `num_classes × image_dim` projection (pattern).
    pub projection: Vec<Vec<f64>>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

impl TaskFrame {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7A5C_F00D);
        let d = spec.image_dim;
        Self {
            prototypes: gaussian_rows(&mut rng, spec.num_classes, d, 1.0),
            slot_codes: gaussian_rows(&mut rng, spec.n_img, d, 1.0),
            projection: gaussian_rows(&mut rng, spec.num_classes, d, 1.0 / (d as f64).sqrt()),
        }
    }

    /// Pattern label: index of the largest `|P·mean_row|` component.
    pub fn pattern_label(&self, features: &[f64], n_img: usize) -> usize {
        let d = features.len() / n_img;
        let mean: Vec<f64> = (0..d)
            .map(|k| (0..n_img).map(|r| features[r * d + k]).sum::<f64>() / n_img as f64)
            .collect();
        let mut best = (0, f64::NEG_INFINITY);
        for (c, row) in self.projection.iter().enumerate() {
            let u: f64 = row.iter().zip(&mean).map(|(p, m)| p * m).sum();
            if u.abs() > best.1 {
                best = (c, u.abs());
            }
        }
        best.0
    }
}

/// `n` labels with every class count within one of `n / C`, shuffled.
fn balanced_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    let mut offset: Vec<usize> = (0..c).collect();
    offset.shuffle(rng);
    let mut labels: Vec<usize> = (0..n).map(|i| offset[i % c]).collect();
    labels.shuffle(rng);
    labels
}

fn noise(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    }
}

fn alignment_sample(spec: &TaskSpec, frame: &TaskFrame, rng: &mut ChaCha8Rng, label: usize) -> Sample {
    let c = spec.num_classes;
    let slot = rng.random_range(0..spec.n_img);
    // Slot contents: a permutation of the classes, extra slots filled at random.
    let mut contents: Vec<usize> = (0..c).collect();
    contents.extend((c..spec.n_img).map(|_| rng.random_range(0..c)));
    contents.shuffle(rng);
    let here = contents.iter().position(|&k| k == label).expect("every class present");
    contents.swap(here, slot);

    let mut features = Vec::with_capacity(spec.n_img * spec.image_dim);
    for (s, &k) in contents.iter().enumerate() {
        for j in 0..spec.image_dim {
            features.push(frame.prototypes[k][j] + frame.slot_codes[s][j] + noise(rng, spec.noise));
        }
    }
    let mut tokens = vec![0; spec.text_len - 1];
    tokens.push(1 + slot);
    Sample { features, tokens, label }
}

fn pattern_sample(spec: &TaskSpec, frame: &TaskFrame, rng: &mut ChaCha8Rng, label: usize) -> Sample {
    loop {
        let features: Vec<f64> = (0..spec.n_img * spec.image_dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        if frame.pattern_label(&features, spec.n_img) == label {
            return Sample {
                features,
                tokens: vec![0; spec.text_len],
                label,
            };
        }
    }
}

fn memorize_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng, label: usize) -> Sample {
    Sample {
        features: (0..spec.n_img * spec.image_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        tokens: (0..spec.text_len).map(|_| rng.random_range(0..spec.vocab_size)).collect(),
        label,
    }
}

fn split(spec: &TaskSpec, frame: &TaskFrame, n: usize, salt: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt);
    let labels = balanced_labels(&mut rng, n, spec.num_classes);
    labels
        .into_iter()
        .map(|y| match spec.kind {
            TaskKind::Alignment => alignment_sample(spec, frame, &mut rng, y),
            TaskKind::Pattern => pattern_sample(spec, frame, &mut rng, y),
            TaskKind::Memorize => memorize_sample(spec, &mut rng, y),
        })
        .collect()
}

/// Builds all three splits; a pure function of `spec`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let frame = TaskFrame::new(spec);
    Ok(Dataset {
        spec: spec.clone(),
        train: split(spec, &frame, spec.n_train, 1),
        val: split(spec, &frame, spec.n_val, 2),
        test: split(spec, &frame, spec.n_test, 3),
    })
}

pub fn write_jsonl(mut w: impl Write, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("dataset", e))?;
    }
    Ok(())
}

/// Reads samples back, checking each has `n_img × image_dim` features.
pub fn read_jsonl(r: impl BufRead, n_img: usize, image_dim: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("dataset", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("dataset line {}: {e}", n + 1)))?;
        if s.features.len() != n_img * image_dim {
            return Err(Error::Parse(format!(
                "dataset line {}: {} features, expected {}",
                n + 1,
                s.features.len(),
                n_img * image_dim
            )));
        }
        out.push(s);
    }
    Ok(out)
}
