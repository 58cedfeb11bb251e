use crate::error::{ensure, Result};
use crate::model::{Model, StateBundle};
use crate::training::Example;

/// Teacher-forced argmax accuracy over every audio target position,
/// including the final EOS.
pub fn token_accuracy(model: &Model, examples: &[Example], states: Option<&StateBundle>) -> Result<f64> {
    ensure!(!examples.is_empty(), "accuracy over an empty set");
    let eos = model.config().eos_id();
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let logits = model.forward(&ex.text_ids, &ex.audio_ids, states)?;
        for (row, &t) in ex.targets(eos).iter().enumerate() {
            let r = logits.row(row);
            let best = (0..r.len())
                .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                .expect("non-empty row");
            hit += usize::from(best == t);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Per-token held-out loss; alias of the training metric.
pub use crate::training::per_token_loss as heldout_loss;
