use rand::Rng as _;

use super::lora::LoraAdapters;
use super::model::{KvCache, MiniLm};
use super::tokenizer::{detokenize, EOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::projector::ProjectedTokens;
use crate::rng;
use crate::tensor::{kernels, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, excluding the terminating `[EOS]`.
    pub ids: Vec<u32>,
    pub text: String,
    pub hit_eos: bool,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MiniLm {
    /// Logits for the last prompt position plus a cache holding the prompt.
    pub fn prefill(
        &self,
        prompt: &[u32],
        image: Option<&ProjectedTokens>,
        adapters: Option<&LoraAdapters>,
    ) -> Result<(Vec<f32>, KvCache)> {
        let mut cache = KvCache::new(self.config().layers);
        let mut tape = Tape::new();
        let img = image.map(|h| tape.leaf(&h.tokens));
        let logits = self.forward_tape(&mut tape, prompt, img, adapters, Some(&mut cache))?;
        let v = tape.value(logits);
        Ok((v[v.len() - VOCAB_SIZE..].to_vec(), cache))
    }

    /// Logits for one new token appended to a cached sequence.
    pub fn step(&self, token: u32, cache: &mut KvCache, adapters: Option<&LoraAdapters>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let logits = self.forward_tape(&mut tape, &[token], None, adapters, Some(cache))?;
        Ok(tape.value(logits).to_vec())
    }

    /// Decodes until `[EOS]`, `max_tokens`, or the context is full.
    pub fn generate(
        &self,
        prompt: &[u32],
        image: Option<&ProjectedTokens>,
        adapters: Option<&LoraAdapters>,
        max_tokens: usize,
        sampling: Sampling,
    ) -> Result<Generation> {
        let rows = image.map_or(0, |h| h.tokens.shape()[0]);
        let needed = Self::positions(prompt, rows);
        if needed > self.config().context {
            return Err(Error::ContextOverflow {
                needed,
                limit: self.config().context,
            });
        }
        let mut out = Generation {
            ids: Vec::new(),
            text: String::new(),
            hit_eos: false,
        };
        if max_tokens == 0 {
            return Ok(out);
        }
        let mut rng = match sampling {
            Sampling::Temperature { seed, .. } => Some(rng::stream(seed, "sample")),
            Sampling::Greedy => None,
        };
        let (mut logits, mut cache) = self.prefill(prompt, image, adapters)?;
        loop {
            let next = match (sampling, rng.as_mut()) {
                (Sampling::Temperature { temperature, .. }, Some(r)) if temperature > 0.0 => {
                    let scaled: Vec<f32> = logits.iter().map(|l| l / temperature).collect();
                    let mut probs = vec![0.0; scaled.len()];
                    kernels::softmax_into(&scaled, &mut probs);
                    let u: f32 = r.random();
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
                _ => argmax(&logits),
            } as u32;
            if next == EOS {
                out.hit_eos = true;
                break;
            }
            out.ids.push(next);
            if out.ids.len() >= max_tokens || cache.len() >= self.config().context {
                break;
            }
            logits = self.step(next, &mut cache, adapters)?;
        }
        out.text = detokenize(&out.ids)?;
        Ok(out)
    }
}
