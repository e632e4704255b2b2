use crate::data::InstructionSample;
use crate::error::{Error, Result};
use crate::lm::tokenizer::{prompt, tokenize, EOS, IMG, PAD};

/// A tokenised instruction sample.
///
/// `tokens` holds the compact ids with a single `[IMG]` placeholder; `targets`
/// and `mask` are indexed by *expanded* position, where the placeholder
/// occupies `image_tokens` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub image_tokens: usize,
    /// Token id at each expanded position (`[PAD]` under the image rows).
    pub expanded: Vec<u32>,
    /// True exactly over response bytes and the closing `[EOS]`.
    pub mask: Vec<bool>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.expanded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expanded.is_empty()
    }

    /// Next-token targets and loss mask aligned with logit rows: row `p`
    /// predicts position `p + 1`; the final row is never scored.
    pub fn shifted(&self) -> (Vec<usize>, Vec<bool>) {
        let t = self.len();
        let mut targets = vec![0; t];
        let mut mask = vec![false; t];
        for p in 0..t.saturating_sub(1) {
            targets[p] = self.expanded[p + 1] as usize;
            mask[p] = self.mask[p + 1];
        }
        (targets, mask)
    }
}

/// `[BOS][IMG]<task><instruction>\n<response>[EOS]`
pub fn make_training_sequence(
    sample: &InstructionSample,
    image_tokens: usize,
    context: usize,
) -> Result<TrainingSequence> {
    sample.validate()?;
    let mut tokens = prompt(sample.task, &sample.instruction);
    let prefix = tokens.len();
    tokens.extend(tokenize(&sample.response));
    tokens.push(EOS);

    let needed = tokens.len() - 1 + image_tokens;
    if needed > context {
        return Err(Error::SampleOverflow {
            id: sample.id.clone(),
            needed,
            limit: context,
        });
    }
    let mut expanded = Vec::with_capacity(needed);
    let mut mask = Vec::with_capacity(needed);
    for (i, &t) in tokens.iter().enumerate() {
        if t == IMG {
            expanded.extend(std::iter::repeat_n(PAD, image_tokens));
            mask.extend(std::iter::repeat_n(false, image_tokens));
        } else {
            expanded.push(t);
            mask.push(i >= prefix);
        }
    }
    Ok(TrainingSequence {
        tokens,
        image_tokens,
        expanded,
        mask,
    })
}
