//! Encoder feature bundles.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn;

/// All encoder-side features for one caption (and optionally its paired
/// image): the first three layers' token states, the final-layer token
/// states, the pooled text and image embeddings, and the end-of-text index
/// used for pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// Token states of the three early ("syntactic") layers, each `L x D`.
    pub syn_layers: [Array2<f64>; 3],
    /// Final-layer token states, `L x D`.
    pub final_seq: Array2<f64>,
    /// Pooled text embedding, length `D`.
    pub text_embed: Array1<f64>,
    /// Pooled image embedding, length `D`. Zero when the bundle is text-only.
    pub image_embed: Array1<f64>,
    /// Token position pooled as the sequence representation.
    pub eot_index: usize,
}

impl EmbeddingBundle {
    pub fn token_count(&self) -> usize {
        self.final_seq.nrows()
    }

    pub fn dim(&self) -> usize {
        self.final_seq.ncols()
    }

    /// The final-layer state at the end-of-text position. This is the
    /// sequence-level text representation fed to the negation gate.
    pub fn eot_state(&self) -> Array1<f64> {
        self.final_seq.row(self.eot_index).to_owned()
    }

    pub fn with_image(mut self, image_embed: Array1<f64>) -> Self {
        self.image_embed = image_embed;
        self
    }

    /// Checks the structural invariants: consistent `L x D` across all
    /// matrices, in-range eot index, finite entries, and unit-norm pooled
    /// embeddings (within `tol`).
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (l, d) = self.final_seq.dim();
        for (i, layer) in self.syn_layers.iter().enumerate() {
            if layer.dim() != (l, d) {
                return Err(Error::Validation(format!(
                    "syn_layers[{i}] is {:?} but final_seq is {:?}",
                    layer.dim(),
                    (l, d)
                )));
            }
            if !nn::all_finite_mat(&layer.view()) {
                return Err(Error::NonFinite("syn_layers"));
            }
        }
        if !nn::all_finite_mat(&self.final_seq.view()) {
            return Err(Error::NonFinite("final_seq"));
        }
        if self.text_embed.len() != d || self.image_embed.len() != d {
            return Err(Error::Validation(format!(
                "pooled embeddings must have length {d}"
            )));
        }
        if !nn::all_finite_vec(&self.text_embed.view()) || !nn::all_finite_vec(&self.image_embed.view())
        {
            return Err(Error::NonFinite("pooled embedding"));
        }
        if self.eot_index >= l {
            return Err(Error::Validation(format!(
                "eot_index {} out of range for {} tokens",
                self.eot_index, l
            )));
        }
        let tn = nn::l2_norm(&self.text_embed.view());
        if (tn - 1.0).abs() > tol {
            return Err(Error::Validation(format!(
                "text_embed norm {tn} deviates from 1 by more than {tol}"
            )));
        }
        let im = nn::l2_norm(&self.image_embed.view());
        if im != 0.0 && (im - 1.0).abs() > tol {
            return Err(Error::Validation(format!(
                "image_embed norm {im} deviates from 1 by more than {tol}"
            )));
        }
        Ok(())
    }
}
