//! Prompt composition and text-feature acquisition.
//!
//! Text prompts are built as a template x state cross product: each state
//! string carries an `[o]` placeholder for the object name, and each template
//! carries a `[c]` placeholder that receives the completed state. Feature
//! vectors for the composed prompts come either from an imported embedding
//! table (a [`Container`] with one tensor per prompt, keyed by the exact
//! prompt string, so real text-encoder features can be exported offline and
//! dropped in) or from the built-in synthetic encoder.
//!
//! ## Synthetic encoder construction
//!
//! The synthetic encoder is a seeded, deterministic projection of a prompt
//! string into R^dim used to run every workflow without external assets:
//!
//! 1. every lowercase word receives a unit vector drawn from a ChaCha stream
//!    seeded by `fnv1a(word) ^ seed`;
//! 2. a prompt embedding is the sum of its word vectors weighted by
//!    `ln((N+1)/df)` over the batch of N prompts being embedded, where `df`
//!    counts the prompts containing the word — words shared by the whole
//!    batch (template boilerplate, the object name) contribute little, while
//!    state words dominate;
//! 3. a small perturbation (scale 0.05) seeded by the full prompt string
//!    keeps distinct prompts distinct;
//! 4. rows are unit-normalized and snapped to the f32 grid so that a table
//!    written to disk reproduces the in-memory features exactly.
//!
//! Prompts sharing a state word therefore land closer together than prompts
//! that differ in state, which is what the representative-vector selectors
//! downstream rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::container::{to_f32_grid, Container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OBJECT_TOKEN: &str = "[o]";
pub const STATE_TOKEN: &str = "[c]";

/// Templates plus normal/abnormal state lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplateSet {
    pub templates: Vec<String>,
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

impl PromptTemplateSet {
    pub fn new(
        templates: Vec<String>,
        normal_states: Vec<String>,
        abnormal_states: Vec<String>,
    ) -> Result<Self> {
        for t in &templates {
            if count_occurrences(t, STATE_TOKEN) != 1 {
                return Err(Error::InvalidTemplate(format!(
                    "template {t:?} must contain {STATE_TOKEN} exactly once"
                )));
            }
        }
        for s in normal_states.iter().chain(&abnormal_states) {
            if count_occurrences(s, OBJECT_TOKEN) != 1 {
                return Err(Error::InvalidTemplate(format!(
                    "state {s:?} must contain {OBJECT_TOKEN} exactly once"
                )));
            }
        }
        Ok(PromptTemplateSet {
            templates,
            normal_states,
            abnormal_states,
        })
    }

    /// Full cross product of templates and states. The object name replaces
    /// `[o]` in each state first; the completed state then replaces `[c]`.
    pub fn compose(&self, object_name: &str) -> (Vec<String>, Vec<String>) {
        let fill = |states: &[String]| -> Vec<String> {
            let mut out = Vec::with_capacity(self.templates.len() * states.len());
            for template in &self.templates {
                for state in states {
                    let filled_state = state.replace(OBJECT_TOKEN, object_name);
                    out.push(template.replace(STATE_TOKEN, &filled_state));
                }
            }
            out
        };
        (fill(&self.normal_states), fill(&self.abnormal_states))
    }

    /// Parse the preset file format: one entry per line under
    /// `[templates]` / `[normal]` / `[abnormal]` section headers. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            None,
            Templates,
            Normal,
            Abnormal,
        }
        let mut section = Section::None;
        let mut templates = Vec::new();
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[templates]" => section = Section::Templates,
                "[normal]" => section = Section::Normal,
                "[abnormal]" => section = Section::Abnormal,
                entry => match section {
                    Section::Templates => templates.push(entry.to_string()),
                    Section::Normal => normal.push(entry.to_string()),
                    Section::Abnormal => abnormal.push(entry.to_string()),
                    Section::None => {
                        return Err(Error::InvalidTemplate(format!(
                            "entry {entry:?} appears before any section header"
                        )))
                    }
                },
            }
        }
        PromptTemplateSet::new(templates, normal, abnormal)
    }

    pub fn to_file_format(&self) -> String {
        let mut out = String::from("[templates]\n");
        for t in &self.templates {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("\n[normal]\n");
        for s in &self.normal_states {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("\n[abnormal]\n");
        for s in &self.abnormal_states {
            out.push_str(s);
            out.push('\n');
        }
        out
    }
}

const BASE_TEMPLATES: &[&str] = &["a photo of a [c]"];

const INDUSTRIAL_NORMAL: &[&str] = &[
    "flawless [o]",
    "perfect [o]",
    "unblemished [o]",
    "[o] without flaw",
    "[o] without defect",
    "[o] without damage",
    "[o] without scratch",
    "[o] without crack",
    "[o] without contamination",
];

const INDUSTRIAL_ABNORMAL: &[&str] = &[
    "damaged [o]",
    "imperfect [o]",
    "blemished [o]",
    "broken [o]",
    "[o] with flaw",
    "[o] with defect",
    "[o] with damage",
    "[o] with scratch",
    "[o] with crack",
    "[o] with contamination",
];

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn without_scratch_crack(states: &[&str]) -> Vec<String> {
    states
        .iter()
        .filter(|s| !s.contains("scratch") && !s.contains("crack"))
        .map(|s| s.to_string())
        .collect()
}

/// Named prompt presets. `industrial` carries the base state lists; the
/// medical presets drop the scratch/crack states and add domain states.
pub fn preset(name: &str) -> Result<PromptTemplateSet> {
    let (normal, abnormal) = match name {
        "industrial" => (strings(INDUSTRIAL_NORMAL), strings(INDUSTRIAL_ABNORMAL)),
        "headct" => {
            let mut ab = without_scratch_crack(INDUSTRIAL_ABNORMAL);
            ab.push("[o] with hemorrhage".to_string());
            (without_scratch_crack(INDUSTRIAL_NORMAL), ab)
        }
        "brainmri" => {
            let mut ab = without_scratch_crack(INDUSTRIAL_ABNORMAL);
            ab.push("[o] with tumor".to_string());
            (without_scratch_crack(INDUSTRIAL_NORMAL), ab)
        }
        "clinicdb" => {
            let mut ab = without_scratch_crack(INDUSTRIAL_ABNORMAL);
            ab.push("[o] with polypus".to_string());
            ab.push("[o] with polyp".to_string());
            (without_scratch_crack(INDUSTRIAL_NORMAL), ab)
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown prompt preset {other:?} (available: industrial, headct, brainmri, clinicdb)"
            )))
        }
    };
    PromptTemplateSet::new(strings(BASE_TEMPLATES), normal, abnormal)
}

pub fn preset_names() -> &'static [&'static str] {
    &["industrial", "headct", "brainmri", "clinicdb"]
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn words(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Deterministic stand-in for a frozen text encoder. See the module docs for
/// the construction.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticEncoder {
    pub seed: u64,
    pub dim: usize,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "synthetic encoder needs dim >= 2");
        SyntheticEncoder { seed, dim }
    }

    fn seeded_unit(&self, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream ^ self.seed);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let n = crate::tensor::norm(&v).max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }

    /// Embed a batch of prompts into unit rows of `[N, dim]`.
    pub fn embed(&self, prompts: &[String]) -> Tensor {
        let n = prompts.len();
        let tokenized: Vec<Vec<String>> = prompts.iter().map(|p| words(p)).collect();
        let mut df: HashMap<&str, usize> = HashMap::new();
        for tokens in &tokenized {
            let mut seen: Vec<&str> = Vec::new();
            for w in tokens {
                if !seen.contains(&w.as_str()) {
                    seen.push(w);
                    *df.entry(w).or_insert(0) += 1;
                }
            }
        }
        let mut out = Tensor::zeros(&[n, self.dim]);
        for (i, (prompt, tokens)) in prompts.iter().zip(&tokenized).enumerate() {
            let mut acc = vec![0.0f64; self.dim];
            for w in tokens {
                let weight = (((n + 1) as f64) / df[w.as_str()] as f64).ln();
                let v = self.seeded_unit(fnv1a(w.as_bytes()));
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += weight * x;
                }
            }
            let perturb = self.seeded_unit(fnv1a(prompt.as_bytes()) ^ 0x9e37_79b9_7f4a_7c15);
            let acc_norm = crate::tensor::norm(&acc).max(1e-12);
            for (a, p) in acc.iter_mut().zip(&perturb) {
                *a = *a / acc_norm + 0.05 * p;
            }
            let final_norm = crate::tensor::norm(&acc).max(1e-12);
            for (j, a) in acc.iter().enumerate() {
                out.set(&[i, j], to_f32_grid(a / final_norm));
            }
        }
        // Snapping to the f32 grid perturbs the norm by at most a few ulps;
        // renormalization is intentionally skipped so table export is exact.
        out
    }
}

/// Embedding table imported from a container: one tensor per prompt, keyed by
/// the exact prompt string.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    container: Container,
}

impl EmbeddingTable {
    pub fn new(container: Container) -> Self {
        EmbeddingTable { container }
    }

    pub fn from_features(prompts: &[String], features: &Tensor) -> Result<Self> {
        assert_eq!(features.rank(), 2);
        assert_eq!(features.shape()[0], prompts.len());
        let dim = features.shape()[1];
        let mut container = Container::new();
        for (i, prompt) in prompts.iter().enumerate() {
            let row = Tensor::from_vec(&[dim], features.row(i).to_vec());
            container.insert(prompt, row)?;
        }
        Ok(EmbeddingTable { container })
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    /// Look up every prompt; rows are unit-normalized on the way out, except
    /// that rows already within 1e-6 of unit norm pass through untouched so
    /// tables exported by this crate reproduce their source features
    /// exactly. Missing prompts are collected into a single error.
    pub fn embed(&self, prompts: &[String]) -> Result<Tensor> {
        let mut missing = Vec::new();
        let mut dim = None;
        for p in prompts {
            match self.container.get(p) {
                Some(t) => {
                    let d = t.len();
                    if let Some(prev) = dim {
                        if prev != d {
                            return Err(Error::InvalidConfig(format!(
                                "embedding table rows disagree on dimension: {prev} vs {d}"
                            )));
                        }
                    }
                    dim = Some(d);
                }
                None => missing.push(p.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingPrompts(missing));
        }
        let dim = dim.ok_or_else(|| Error::EmptyDistribution("no prompts requested".into()))?;
        let mut out = Tensor::zeros(&[prompts.len(), dim]);
        for (i, p) in prompts.iter().enumerate() {
            let row = self.container.get(p).unwrap();
            let n = crate::tensor::norm(row.data());
            let scale = if (n - 1.0).abs() <= 1e-6 || n == 0.0 {
                1.0
            } else {
                1.0 / n
            };
            for (j, &v) in row.data().iter().enumerate() {
                out.set(&[i, j], v * scale);
            }
        }
        Ok(out)
    }
}

/// Where a distribution's features came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Imported,
    Synthetic,
}

/// Sampled text-feature sets for one object class: unit rows, one per
/// composed prompt, split into the normal and abnormal distributions.
#[derive(Debug, Clone)]
pub struct PromptDistribution {
    pub object_name: String,
    pub normal_features: Tensor,
    pub abnormal_features: Tensor,
    pub source: FeatureSource,
}

impl PromptDistribution {
    /// Compose prompts and embed them with the synthetic encoder. Normal and
    /// abnormal prompts are embedded as one batch so the word statistics the
    /// encoder relies on see both vocabularies.
    pub fn synthesize(
        set: &PromptTemplateSet,
        object_name: &str,
        encoder: &SyntheticEncoder,
    ) -> Self {
        let (normal, abnormal) = set.compose(object_name);
        let mut all = normal.clone();
        all.extend(abnormal.iter().cloned());
        let features = encoder.embed(&all);
        let dim = encoder.dim;
        let split = |rows: std::ops::Range<usize>| -> Tensor {
            let mut t = Tensor::zeros(&[rows.len(), dim]);
            for (out_i, src_i) in rows.enumerate() {
                for j in 0..dim {
                    t.set(&[out_i, j], features.at(&[src_i, j]));
                }
            }
            t
        };
        PromptDistribution {
            object_name: object_name.to_string(),
            normal_features: split(0..normal.len()),
            abnormal_features: split(normal.len()..all.len()),
            source: FeatureSource::Synthetic,
        }
    }

    /// Compose prompts and look their features up in an imported table.
    pub fn from_table(
        set: &PromptTemplateSet,
        object_name: &str,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        let (normal, abnormal) = set.compose(object_name);
        Ok(PromptDistribution {
            object_name: object_name.to_string(),
            normal_features: table.embed(&normal)?,
            abnormal_features: table.embed(&abnormal)?,
            source: FeatureSource::Imported,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal_features.shape()[1]
    }
}
