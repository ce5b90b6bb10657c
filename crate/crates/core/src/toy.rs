//! Deterministic desk-scale stand-in for a frozen contrastive encoder.
//!
//! The toy backbone reproduces the failure mode this crate exists to repair:
//! its pooled text embedding is a bag of object words, so inserting a
//! negation marker changes nothing at the pooled level. The marker is only
//! visible in the sequence features, scaled by the strength of the negation
//! cue, which is exactly the signal the lens and gate have to dig out.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::EmbeddingBundle;
use crate::data::{Strength, StrengthScales};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;

/// Object nouns; a config selects the first `num_objects` of them.
pub const OBJECT_WORDS: [&str; 18] = [
    "cat", "dog", "car", "tree", "house", "bird", "fish", "boat", "apple", "chair", "horse",
    "flower", "clock", "plane", "shoe", "cup", "book", "lamp",
];

/// Filler words usable in captions and prompts. They never contribute to the
/// pooled text embedding's signal, only to its caption-keyed noise.
pub const FILLER_WORDS: [&str; 12] = [
    "a", "photo", "of", "and", "the", "with", "there", "is", "in", "this", "image", "shows",
];

pub const MARKER: &str = "no";
const PAD: &str = "<pad>";

/// Mixing coefficient for the running-context term added to every token row.
const MIX: f64 = 1.0;
/// Per-syntactic-layer context coefficients (final layer uses `MIX`).
const SYN_MIX: [f64; 3] = [0.5, 0.75, 1.0];
/// Spread of the near-identity rotations applied to the syntactic layers.
const SYN_SPREAD: f64 = 0.25;
/// Pooled text noise as a fraction of `noise_sigma`.
const TEXT_NOISE_FRAC: f64 = 0.4;

/// True for the bare marker and any strength-tagged form of it.
pub fn is_marker_token(token: &str) -> bool {
    token == MARKER || token.starts_with("no:")
}

/// Marker token carrying an explicit strength tag, e.g. `no:weak`.
pub fn marker_token(strength: Strength) -> String {
    format!("{MARKER}:{strength}")
}

fn default_scales() -> StrengthScales {
    [
        (Strength::Strong, 1.0),
        (Strength::Moderate, 0.75),
        (Strength::Weak, 0.5),
        (Strength::Weakest, 0.25),
    ]
    .into_iter()
    .collect()
}

/// Generator parameters for the toy backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    /// Embedding width shared by the encoder space and the joint space.
    pub dim: usize,
    /// Token capacity; shorter captions are padded, longer ones rejected.
    pub seq_len: usize,
    pub num_objects: usize,
    /// Gaussian noise on sequence rows and image embeddings. The pooled text
    /// embedding uses a fixed fraction of it.
    pub noise_sigma: f64,
    #[serde(default = "default_scales")]
    pub negation_strength_scales: StrengthScales,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            dim: 32,
            seq_len: 8,
            num_objects: 16,
            noise_sigma: 0.05,
            negation_strength_scales: default_scales(),
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::InvalidConfig(format!("dim {} < 4", self.dim)));
        }
        if self.seq_len < 4 {
            return Err(Error::InvalidConfig(format!("seq_len {} < 4", self.seq_len)));
        }
        if self.num_objects < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_objects {} < 2",
                self.num_objects
            )));
        }
        if self.num_objects > OBJECT_WORDS.len() {
            return Err(Error::InvalidConfig(format!(
                "num_objects {} exceeds the {} available object words",
                self.num_objects,
                OBJECT_WORDS.len()
            )));
        }
        let vocab = self.num_objects + FILLER_WORDS.len() + 2;
        if vocab > self.dim {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {vocab} words does not fit in dim {}",
                self.dim
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        let mut prev = f64::INFINITY;
        for s in Strength::ALL {
            let Some(&v) = self.negation_strength_scales.get(&s) else {
                return Err(Error::InvalidConfig(format!("missing strength scale for {s}")));
            };
            if !(v > 0.0 && v < prev) {
                return Err(Error::InvalidConfig(
                    "strength scales must be positive and strictly decreasing strong->weakest"
                        .into(),
                ));
            }
            prev = v;
        }
        Ok(())
    }
}

/// The instantiated backbone: a fixed orthonormal token basis plus fixed
/// per-layer transforms, all derived from the config seed.
pub struct ToyWorld {
    cfg: ToyWorldConfig,
    token_index: HashMap<String, usize>,
    /// Orthonormal token vectors, one row per vocabulary word.
    token_vectors: Array2<f64>,
    /// Near-identity rotations applied to the syntactic layers.
    syn_proj: [Array2<f64>; 3],
    marker_row: usize,
}

#[derive(Clone, Copy)]
struct ParsedToken {
    row: usize,
    scale: f64,
    is_object: bool,
    is_marker: bool,
}

impl ToyWorld {
    pub fn new(cfg: ToyWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut vocab: Vec<&str> = vec![PAD, MARKER];
        vocab.extend(FILLER_WORDS);
        vocab.extend(&OBJECT_WORDS[..cfg.num_objects]);

        let mut token_vectors = Array2::zeros((vocab.len(), cfg.dim));
        for (i, word) in vocab.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, "vocab", &[word.as_bytes()]);
            token_vectors
                .row_mut(i)
                .assign(&rng::normal_vec(&mut r, cfg.dim));
        }
        // Orthonormalized in canonical vocabulary order so every word is a
        // clean axis; object identity and the marker stay linearly
        // recoverable underneath the row noise.
        rng::orthonormalize_rows(&mut token_vectors);

        let token_index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i))
            .collect();

        let syn_proj = std::array::from_fn(|l| {
            let mut r = rng::stream(cfg.seed, "syn-proj", &[&[l as u8]]);
            rng::near_identity_orthogonal(&mut r, cfg.dim, SYN_SPREAD)
        });

        Ok(ToyWorld {
            cfg,
            token_index,
            token_vectors,
            syn_proj,
            marker_row: 1,
        })
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.seq_len
    }

    pub fn object_words(&self) -> &[&'static str] {
        &OBJECT_WORDS[..self.cfg.num_objects]
    }

    /// The fixed unit vector of a vocabulary word.
    pub fn token_vector(&self, token: &str) -> Result<Array1<f64>> {
        let parsed = self.parse_token(token)?;
        Ok(self.token_vectors.row(parsed.row).to_owned())
    }

    fn parse_token(&self, token: &str) -> Result<ParsedToken> {
        if let Some(tag) = token.strip_prefix("no:") {
            let strength: Strength = tag
                .parse()
                .map_err(|_| Error::UnknownToken(token.to_string()))?;
            let scale = self.cfg.negation_strength_scales[&strength];
            return Ok(ParsedToken {
                row: self.marker_row,
                scale,
                is_object: false,
                is_marker: true,
            });
        }
        let &row = self
            .token_index
            .get(token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))?;
        if token == MARKER {
            return Ok(ParsedToken {
                row,
                scale: self.cfg.negation_strength_scales[&Strength::Strong],
                is_object: false,
                is_marker: true,
            });
        }
        let is_object = self.object_words().contains(&token);
        Ok(ParsedToken {
            row,
            scale: 1.0,
            is_object,
            is_marker: false,
        })
    }

    /// Encodes a caption into the text side of an [`EmbeddingBundle`].
    ///
    /// Rows are `scale * token_vector + running context + noise`, where the
    /// running context is the prefix sum of scaled token vectors, the
    /// negation marker's vector is scaled by its strength level, and the
    /// noise stream is keyed by the full caption. The pooled `text_embed`
    /// sums object-word vectors only and is blind to the marker by
    /// construction; its small noise term is keyed by the caption's
    /// non-marker tokens so that marker insertion cannot change it.
    pub fn encode_text(&self, caption: &[String]) -> Result<EmbeddingBundle> {
        let l = self.cfg.seq_len;
        let d = self.cfg.dim;
        if caption.len() > l {
            return Err(Error::CaptionTooLong {
                len: caption.len(),
                max: l,
            });
        }
        let mut parsed = Vec::with_capacity(l);
        for tok in caption {
            parsed.push(self.parse_token(tok)?);
        }
        let pad = self.parse_token(PAD)?;
        while parsed.len() < l {
            parsed.push(pad);
        }

        // base rows and inclusive prefix context
        let mut base = Array2::zeros((l, d));
        let mut ctx = Array2::zeros((l, d));
        let mut running = Array1::<f64>::zeros(d);
        for (t, p) in parsed.iter().enumerate() {
            let row = self.token_vectors.row(p.row);
            base.row_mut(t).assign(&(&row * p.scale));
            running += &base.row(t);
            ctx.row_mut(t).assign(&running);
        }

        let sigma = self.cfg.noise_sigma;
        let mut seq_noise = rng::stream_for_tokens(self.cfg.seed, "seq-noise", caption);

        let mut final_seq = &base + &(&ctx * MIX);
        if sigma > 0.0 {
            final_seq += &(rng::normal_mat(&mut seq_noise, l, d) * sigma);
        }

        let syn_layers = std::array::from_fn(|layer| {
            let mut rows = &base + &(&ctx * SYN_MIX[layer]);
            if sigma > 0.0 {
                rows += &(rng::normal_mat(&mut seq_noise, l, d) * sigma);
            }
            rows.dot(&self.syn_proj[layer].t())
        });

        let mut pooled = Array1::<f64>::zeros(d);
        for p in &parsed {
            if p.is_object {
                pooled += &self.token_vectors.row(p.row);
            }
        }
        if sigma > 0.0 {
            let non_marker: Vec<String> = caption
                .iter()
                .filter(|t| !is_marker_token(t))
                .cloned()
                .collect();
            let mut r = rng::stream_for_tokens(self.cfg.seed, "embed-noise", &non_marker);
            pooled += &(rng::normal_vec(&mut r, d) * (sigma * TEXT_NOISE_FRAC));
        }
        let norm = nn::l2_norm(&pooled.view());
        if norm < 1e-12 {
            return Err(Error::ZeroNorm("pooled text embedding"));
        }
        pooled /= norm;

        Ok(EmbeddingBundle {
            syn_layers,
            final_seq,
            text_embed: pooled,
            image_embed: Array1::zeros(d),
            eot_index: l - 1,
        })
    }

    /// L2-normalized sum of the present objects' vectors plus sample noise.
    pub fn encode_image(&self, present_objects: &[String], sample_seed: u64) -> Result<Array1<f64>> {
        if present_objects.is_empty() {
            return Err(Error::Empty("present_objects"));
        }
        if present_objects.len() > self.cfg.num_objects {
            return Err(Error::Validation(format!(
                "{} objects exceed the world's {}",
                present_objects.len(),
                self.cfg.num_objects
            )));
        }
        let mut v = Array1::<f64>::zeros(self.cfg.dim);
        for obj in present_objects {
            let p = self.parse_token(obj)?;
            if !p.is_object {
                return Err(Error::UnknownToken(obj.clone()));
            }
            v += &self.token_vectors.row(p.row);
        }
        if self.cfg.noise_sigma > 0.0 {
            let mut r = rng::stream(self.cfg.seed, "image-noise", &[&sample_seed.to_le_bytes()]);
            v += &(rng::normal_vec(&mut r, self.cfg.dim) * self.cfg.noise_sigma);
        }
        let norm = nn::l2_norm(&v.view());
        if norm < 1e-12 {
            return Err(Error::ZeroNorm("image embedding"));
        }
        Ok(v / norm)
    }

    /// Encoder embedding of the supervision prompt naming the negated
    /// object; the stage-1 target and stage-2 stand-in negation feature.
    pub fn prompt_feature(&self, neg_object: &str) -> Result<Array1<f64>> {
        let caption: Vec<String> = ["this", "image", "shows", "a", neg_object]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Ok(self.encode_text(&caption)?.text_embed)
    }
}
