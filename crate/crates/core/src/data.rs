//! Examples, the planted-rationale synthetic corpus, JSONL ingestion and
//! gold-annotation subsampling.
//!
//! Every random choice here goes through [`rng`], a ChaCha8 stream keyed by
//! an explicit seed, so datasets are identical across platforms and runs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding id. Never appears in example tokens.
pub const PAD: u32 = 0;
/// Replacement id for removed tokens. Never appears in example tokens.
pub const MASK: u32 = 1;
/// Smallest id available to real tokens.
pub const FIRST_TOKEN_ID: u32 = 2;

/// Seeded platform-stable generator: ChaCha8 keyed by `seed`, on a separate
/// stream per purpose.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<u32>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<u8>>,
}

impl Example {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>, label: usize, rationale: Option<Vec<u8>>) -> Result<Self> {
        let ex = Self {
            id: id.into(),
            tokens,
            label,
            rationale,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_gold(&self) -> bool {
        self.rationale.is_some()
    }

    /// Gold rationale as 0/1 floats.
    pub fn gold_f64(&self) -> Option<Vec<f64>> {
        self.rationale
            .as_ref()
            .map(|r| r.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::contract(format!("example {}: no tokens", self.id)));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t < FIRST_TOKEN_ID) {
            return Err(Error::contract(format!(
                "example {}: reserved token id {t}",
                self.id
            )));
        }
        if let Some(r) = &self.rationale {
            if r.len() != self.tokens.len() {
                return Err(Error::contract(format!(
                    "example {}: rationale length {} != token count {}",
                    self.id,
                    r.len(),
                    self.tokens.len()
                )));
            }
            if r.iter().any(|&b| b > 1) {
                return Err(Error::contract(format!(
                    "example {}: rationale entries must be 0 or 1",
                    self.id
                )));
            }
            if !r.contains(&1) {
                return Err(Error::contract(format!(
                    "example {}: rationale marks no tokens",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn gold_count(&self) -> usize {
        self.examples.iter().filter(|e| e.has_gold()).count()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(Example::len).max().unwrap_or(0)
    }

    pub fn max_token(&self) -> Option<u32> {
        self.examples.iter().flat_map(|e| e.tokens.iter().copied()).max()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }

    /// Same examples with every gold rationale removed.
    pub fn without_gold(&self) -> Dataset {
        Dataset::new(
            self.examples
                .iter()
                .map(|e| Example {
                    rationale: None,
                    ..e.clone()
                })
                .collect(),
        )
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;
    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// One contiguous span of signal tokens.
    Contiguous,
    /// Signal tokens at random distinct positions.
    Scatter,
}

/// Parameters of the planted-rationale corpus.
///
/// Ids are laid out as `[PAD, MASK, signal pools, decoy pools, noise]`, one
/// signal and one decoy pool per class.
///
/// Decoys are off by default. When enabled, `decoy_len` positions outside the
/// rationale carry tokens from the label's decoy pool: the label then leaks
/// outside the gold span, the way real corpora contain cues annotators do
/// not highlight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Inclusive range of sequence lengths.
    pub seq_len: [usize; 2],
    /// Inclusive range of planted rationale lengths.
    pub rationale_len: [usize; 2],
    /// Signal tokens per class.
    pub signal_pool_size: usize,
    pub placement: Placement,
    /// Unannotated label-correlated positions per example.
    #[serde(default)]
    pub decoy_len: usize,
    /// Decoy tokens per class.
    #[serde(default)]
    pub decoy_pool_size: usize,
    pub num_train: usize,
    pub num_dev: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_classes: 2,
            seq_len: [20, 20],
            rationale_len: [4, 4],
            signal_pool_size: 20,
            placement: Placement::Contiguous,
            decoy_len: 0,
            decoy_pool_size: 0,
            num_train: 2000,
            num_dev: 500,
        }
    }
}

impl SyntheticSpec {
    pub fn signal_pool(&self, class: usize) -> std::ops::Range<u32> {
        let start = FIRST_TOKEN_ID as usize + class * self.signal_pool_size;
        start as u32..(start + self.signal_pool_size) as u32
    }

    pub fn decoy_pool(&self, class: usize) -> std::ops::Range<u32> {
        let start = FIRST_TOKEN_ID as usize
            + self.num_classes * self.signal_pool_size
            + class * self.decoy_pool_size;
        start as u32..(start + self.decoy_pool_size) as u32
    }

    fn reserved(&self) -> usize {
        FIRST_TOKEN_ID as usize + self.num_classes * (self.signal_pool_size + self.decoy_pool_size)
    }

    pub fn noise_pool(&self) -> std::ops::Range<u32> {
        self.reserved() as u32..self.vocab_size as u32
    }

    /// Class whose signal pool contains `token`, if any.
    pub fn class_of(&self, token: u32) -> Option<usize> {
        (0..self.num_classes).find(|&c| self.signal_pool(c).contains(&token))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return cfg(format!("data.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.signal_pool_size == 0 {
            return cfg("data.signal_pool_size must be >= 1".into());
        }
        let [lo, hi] = self.seq_len;
        let [rlo, rhi] = self.rationale_len;
        if lo == 0 || lo > hi {
            return cfg(format!("data.seq_len range [{lo}, {hi}] is empty or starts at 0"));
        }
        if rlo == 0 || rlo > rhi || rhi > lo {
            return cfg(format!(
                "data.rationale_len range [{rlo}, {rhi}] must be nonempty, start at >= 1 and fit in the shortest sequence ({lo})"
            ));
        }
        if self.decoy_len > 0 && self.decoy_pool_size == 0 {
            return cfg("data.decoy_pool_size must be >= 1 when data.decoy_len > 0".into());
        }
        if rhi + self.decoy_len > lo {
            return cfg(format!(
                "data.rationale_len max {rhi} plus data.decoy_len {} exceeds the shortest sequence ({lo})",
                self.decoy_len
            ));
        }
        let reserved = self.reserved();
        if self.vocab_size <= reserved {
            return cfg(format!(
                "data.vocab_size {} leaves no noise tokens after {} reserved, signal and decoy ids",
                self.vocab_size, reserved
            ));
        }
        Ok(())
    }
}

/// Generates `spec.num_train + spec.num_dev` examples: classes in equal
/// proportion, each with one planted rationale drawn from its class pool and
/// every other position filled with class-independent noise (or, with
/// decoys enabled, some of them with class decoys).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.num_train + spec.num_dev;
    let mut r = rng(seed, 0);
    let noise = spec.noise_pool();
    let mut examples = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.num_classes;
        let pool = spec.signal_pool(label);
        let n = r.random_range(spec.seq_len[0]..=spec.seq_len[1]);
        let span = r.random_range(spec.rationale_len[0]..=spec.rationale_len[1]);
        let mut gold = vec![0u8; n];
        match spec.placement {
            Placement::Contiguous => {
                let start = r.random_range(0..=n - span);
                gold[start..start + span].iter_mut().for_each(|g| *g = 1);
            }
            Placement::Scatter => {
                let mut positions: Vec<usize> = (0..n).collect();
                positions.shuffle(&mut r);
                for &p in &positions[..span] {
                    gold[p] = 1;
                }
            }
        }
        let mut decoy = vec![false; n];
        if spec.decoy_len > 0 {
            let mut free: Vec<usize> = (0..n).filter(|&t| gold[t] == 0).collect();
            free.shuffle(&mut r);
            for &t in &free[..spec.decoy_len] {
                decoy[t] = true;
            }
        }
        let decoys = spec.decoy_pool(label);
        let tokens = (0..n)
            .map(|t| {
                if gold[t] == 1 {
                    r.random_range(pool.clone())
                } else if decoy[t] {
                    r.random_range(decoys.clone())
                } else {
                    r.random_range(noise.clone())
                }
            })
            .collect();
        examples.push(Example {
            id: format!("syn-{seed}-{i:06}"),
            tokens,
            label,
            rationale: Some(gold),
        });
    }
    examples.shuffle(&mut r);
    Ok(Dataset::new(examples))
}

/// Generates the synthetic corpus and splits it into train and dev parts of
/// the sizes in `spec`.
pub fn synthetic_splits(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let all = generate_synthetic(spec, seed)?;
    let mut examples = all.examples;
    let dev = examples.split_off(spec.num_train);
    Ok((Dataset::new(examples), Dataset::new(dev)))
}

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub diagnostics: Vec<Diagnostic>,
}

impl Loaded {
    pub fn warning_count(&self) -> usize {
        self.diagnostics.len()
    }
}

/// Reads one JSON example per line: `{"id", "tokens", "label", "rationale"?}`.
///
/// Lines that do not parse or violate example invariants are skipped with a
/// diagnostic. A label outside `0..num_classes` fails the whole load. Blank
/// lines are ignored.
pub fn load_jsonl(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Loaded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path, num_classes)
}

pub fn read_jsonl(reader: impl BufRead, path: &Path, num_classes: Option<usize>) -> Result<Loaded> {
    let mut examples = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = match serde_json::from_str(&line) {
            Ok(ex) => ex,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Some(m) = num_classes {
            if ex.label >= m {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("unknown label {} (expected 0..{m})", ex.label),
                });
            }
        }
        if let Err(e) = ex.validate() {
            diagnostics.push(Diagnostic {
                line: lineno,
                message: e.to_string(),
            });
            continue;
        }
        examples.push(ex);
    }
    Ok(Loaded {
        dataset: Dataset::new(examples),
        diagnostics,
    })
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(dataset, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    for ex in dataset {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

/// Keeps the gold rationale on exactly `floor(fraction * G)` of the `G`
/// examples that carry one, chosen by a seeded shuffle; strips it elsewhere.
///
/// The retained set for a smaller fraction is a prefix of the same shuffle,
/// hence a subset of the retained set for any larger fraction at that seed.
pub fn subsample_gold(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!(
            "subsample_gold: fraction {fraction} outside [0, 1]"
        )));
    }
    let mut gold_idx: Vec<usize> = dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.has_gold())
        .map(|(i, _)| i)
        .collect();
    // Tolerate representation error such as 0.29 * 100 = 28.999999999999996.
    let keep = ((fraction * gold_idx.len() as f64) + 1e-9).floor() as usize;
    gold_idx.shuffle(&mut rng(seed, 7));
    let mut retain = vec![false; dataset.len()];
    for &i in &gold_idx[..keep] {
        retain[i] = true;
    }
    Ok(Dataset::new(
        dataset
            .examples
            .iter()
            .zip(retain)
            .map(|(e, keep)| Example {
                rationale: if keep { e.rationale.clone() } else { None },
                ..e.clone()
            })
            .collect(),
    ))
}
