//! Terminal chat over a single image.

use std::io::{BufRead, Write};

use anyhow::Result;
use spectra_core::lm::tokenizer::prompt;
use spectra_core::lm::{Sampling, Task};
use spectra_core::projector::ProjectedTokens;
use spectra_core::train::Checkpoint;

pub struct Session<'a> {
    pub checkpoint: &'a Checkpoint,
    pub image: &'a ProjectedTokens,
    pub task: Task,
    pub max_tokens: usize,
}

impl Session<'_> {
    pub fn answer(&self, instruction: &str) -> Result<String> {
        let ck = self.checkpoint;
        let g = ck.lm.generate(
            &prompt(self.task, instruction),
            Some(self.image),
            ck.adapters.as_ref(),
            self.max_tokens,
            Sampling::Greedy,
        )?;
        Ok(g.text)
    }

    /// Reads instructions until `/quit` or end of input. Answers go to
    /// `out`, prompts and notices to `diag`.
    pub fn run(&mut self, input: impl BufRead, mut out: impl Write, mut diag: impl Write) -> Result<()> {
        let mut lines = input.lines();
        loop {
            write!(diag, "{}> ", self.task.name())?;
            diag.flush()?;
            let Some(line) = lines.next() else { break };
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if let Some(cmd) = line.strip_prefix('/') {
                let mut parts = cmd.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("quit"), _) => break,
                    (Some("task"), Some(name)) => match Task::parse(name) {
                        Some(t) => self.task = t,
                        None => writeln!(diag, "unknown task `{name}`; use caption or classification")?,
                    },
                    _ => writeln!(diag, "commands: /task caption|classification, /quit")?,
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            writeln!(out, "{}", self.answer(line)?)?;
            out.flush()?;
        }
        writeln!(diag)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectra_core::encoder::{EncoderConfig, EncoderWeights, SpectralPatchConfig};
    use spectra_core::lm::{LmConfig, MiniLm};
    use spectra_core::projector::{ProjectorConfig, ProjectorWeights};
    use spectra_core::tensor::Tensor;

    fn tiny() -> (Checkpoint, ProjectedTokens) {
        let enc = EncoderConfig {
            patch: SpectralPatchConfig {
                image_size: 8,
                bands: 2,
                patch: 4,
                spectral_group: 2,
            },
            dim: 8,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        };
        let lm = LmConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            context: 128,
            mlp_ratio: 2,
        };
        let projector = ProjectorWeights::init(
            1,
            ProjectorConfig {
                vision_dim: 8,
                lm_dim: 8,
                bias: true,
            },
        )
        .unwrap();
        let image = ProjectedTokens {
            tokens: Tensor::ones(&[4, 8]),
        };
        let ck = Checkpoint {
            encoder: EncoderWeights::init(1, enc).unwrap(),
            projector,
            lm: MiniLm::init(1, lm).unwrap(),
            adapters: None,
        };
        (ck, image)
    }

    fn chat(input: &str) -> String {
        let (ck, image) = tiny();
        let mut s = Session {
            checkpoint: &ck,
            image: &image,
            task: Task::Caption,
            max_tokens: 6,
        };
        let mut out = Vec::new();
        s.run(input.as_bytes(), &mut out, std::io::sink()).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn quit_generates_nothing() {
        assert_eq!(chat("/quit\nwhat is here?\n"), "");
    }

    #[test]
    fn greedy_answers_repeat() {
        let out = chat("describe\ndescribe\n");
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], lines[1]);
    }

    #[test]
    fn task_switch_is_not_an_answer() {
        assert_eq!(chat("/task classification\n/task bogus\n").lines().count(), 0);
    }
}
