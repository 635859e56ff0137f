use dxcode_core::corpus::{clean_text, Inventory};
use dxcode_core::model::{sigmoid, Batch, ModelState};
use dxcode_core::terminology::ConceptGraph;
use dxcode_core::tokenizer::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub code: String,
    /// Preferred term; `null` when the terminology does not know the code.
    pub term: Option<String>,
    pub probability: f64,
    pub above_threshold: bool,
}

/// A trained model with the vocabulary and code list it was trained on.
pub struct Suggester {
    state: ModelState,
    vocab: Vocabulary,
    codes: Vec<String>,
    terms: Vec<Option<String>>,
}

impl Suggester {
    pub fn new(
        state: ModelState,
        vocab: Vocabulary,
        inventory: &Inventory,
        graph: Option<&ConceptGraph>,
    ) -> Result<Self, ServiceError> {
        let config = &state.config;
        if config.classes != inventory.len() {
            return Err(ServiceError::Validation(format!(
                "model has {} outputs but the inventory has {} codes",
                config.classes,
                inventory.len()
            )));
        }
        if config.vocab_size != vocab.size() || config.max_len < vocab.max_len() {
            return Err(ServiceError::Validation(format!(
                "vocabulary (size {}, max_len {}) does not fit the model (size {}, max_len {})",
                vocab.size(),
                vocab.max_len(),
                config.vocab_size,
                config.max_len
            )));
        }
        let codes = inventory.codes().to_vec();
        let terms = codes
            .iter()
            .map(|c| graph.and_then(|g| g.term(c)).map(str::to_string))
            .collect();
        Ok(Suggester {
            state,
            vocab,
            codes,
            terms,
        })
    }

    /// Sigmoid outputs of the inference-mode model, in inventory order.
    pub fn probabilities(&self, text: &str) -> Result<Vec<f64>, ServiceError> {
        let encoded = self.vocab.encode(&clean_text(text));
        let batch = Batch::from_sequences(&[encoded.ids]);
        let logits = self
            .state
            .forward(&batch, false, 0)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(logits.row(0).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Top `top_k` codes by probability, ties broken by code.
    pub fn suggest(&self, text: &str, top_k: usize, threshold: f64) -> Result<Vec<Suggestion>, ServiceError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ServiceError::Validation(format!("threshold {threshold} is outside [0, 1]")));
        }
        if top_k == 0 {
            return Ok(Vec::new());
        }
        let probs = self.probabilities(text)?;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then_with(|| self.codes[a].cmp(&self.codes[b])));
        Ok(order
            .into_iter()
            .take(top_k)
            .map(|i| Suggestion {
                code: self.codes[i].clone(),
                term: self.terms[i].clone(),
                probability: probs[i],
                above_threshold: probs[i] > threshold,
            })
            .collect())
    }
}
