//! Dataset rows joined with their encoder features.
//!
//! Training and evaluation work over prepared samples: every caption encoded
//! once, every image reference resolved against the embedding container, and
//! the supervision prompt feature precomputed per negated object.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array1;

use crate::bundle::EmbeddingBundle;
use crate::data::{McqSample, Strength, TripletSample};
use crate::error::{Error, Result};
use crate::toy::ToyWorld;

#[derive(Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: Array1<f64>,
    pub pos_bundle: Arc<EmbeddingBundle>,
    pub neg_bundle: Arc<EmbeddingBundle>,
    /// Encoder feature of the prompt naming the negated object.
    pub t_gt: Array1<f64>,
    pub strength: Option<Strength>,
}

impl PreparedSample {
    pub fn pos_embed(&self) -> &Array1<f64> {
        &self.pos_bundle.text_embed
    }

    pub fn neg_embed(&self) -> &Array1<f64> {
        &self.neg_bundle.text_embed
    }
}

pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
    pub dim: usize,
}

impl PreparedDataset {
    pub fn prepare(
        world: &ToyWorld,
        rows: &[TripletSample],
        images: &HashMap<String, Array1<f64>>,
    ) -> Result<Self> {
        let mut prompt_cache: HashMap<String, Array1<f64>> = HashMap::new();
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let image = images
                .get(&row.image)
                .ok_or_else(|| Error::DanglingImage(row.image.clone()))?
                .clone();
            let t_gt = match prompt_cache.get(&row.neg_object) {
                Some(v) => v.clone(),
                None => {
                    let v = world.prompt_feature(&row.neg_object)?;
                    prompt_cache.insert(row.neg_object.clone(), v.clone());
                    v
                }
            };
            samples.push(PreparedSample {
                id: row.id.clone(),
                image,
                pos_bundle: Arc::new(world.encode_text(&row.pos_caption)?),
                neg_bundle: Arc::new(world.encode_text(&row.neg_caption)?),
                t_gt,
                strength: row.neg_strength,
            });
        }
        Ok(PreparedDataset {
            samples,
            dim: world.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub struct PreparedMcqSample {
    pub id: String,
    pub image: Array1<f64>,
    pub choices: Vec<Arc<EmbeddingBundle>>,
    pub answer: usize,
}

pub fn prepare_mcq(
    world: &ToyWorld,
    rows: &[McqSample],
    images: &HashMap<String, Array1<f64>>,
) -> Result<Vec<PreparedMcqSample>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.answer >= row.choices.len() {
            return Err(Error::AnswerOutOfRange {
                answer: row.answer,
                choices: row.choices.len(),
            });
        }
        let image = images
            .get(&row.image)
            .ok_or_else(|| Error::DanglingImage(row.image.clone()))?
            .clone();
        let mut choices = Vec::with_capacity(row.choices.len());
        for caption in &row.choices {
            choices.push(Arc::new(world.encode_text(caption)?));
        }
        out.push(PreparedMcqSample {
            id: row.id.clone(),
            image,
            choices,
            answer: row.answer,
        });
    }
    Ok(out)
}
