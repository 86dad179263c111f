//! Audio-to-text inference: log-mel front-end, one encoder pass, greedy decode.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoders::{
    ctc_greedy, ctc_logits, rnnt_greedy, Hypothesis, RnntDecoderWeights, Vocab, MAX_SYMBOLS_PER_FRAME,
};
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::frontend::{AudioBuffer, LogMelExtractor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Ctc,
    Rnnt,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Ctc => "ctc",
            DecoderKind::Rnnt => "rnnt",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(DecoderKind::Ctc),
            "rnnt" => Ok(DecoderKind::Rnnt),
            other => Err(Error::Config(format!(
                "unknown decoder `{other}` (expected ctc or rnnt)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcription {
    pub hypothesis: Hypothesis,
    pub frontend_seconds: f64,
}

impl Transcription {
    pub fn total_seconds(&self) -> f64 {
        self.frontend_seconds + self.hypothesis.encoder_seconds + self.hypothesis.decode_seconds
    }
}

pub struct Pipeline {
    model: EncoderModel,
    vocab: Vocab,
    extractor: LogMelExtractor,
}

impl Pipeline {
    pub fn new(model: EncoderModel, vocab: Vocab) -> Result<Self> {
        let heads = model
            .heads()
            .ok_or_else(|| Error::Config("model has no decoder heads attached".into()))?;
        if heads.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "heads were built for {} tokens, vocabulary has {}",
                heads.vocab_size,
                vocab.len()
            )));
        }
        Ok(Pipeline {
            model,
            vocab,
            extractor: LogMelExtractor::new(),
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn supports(&self, decoder: DecoderKind) -> bool {
        self.model.heads().is_some_and(|h| match decoder {
            DecoderKind::Ctc => h.ctc,
            DecoderKind::Rnnt => h.rnnt,
        })
    }

    /// Normalized log-mel features `[T, 80]`.
    pub fn features(&self, audio: &AudioBuffer) -> Result<Tensor> {
        Ok(self.extractor.log_mel(audio)?.frames)
    }

    pub fn encode(&self, feats: &Tensor) -> Result<Tensor> {
        self.model.forward(feats)
    }

    pub fn decode(&self, enc: &Tensor, decoder: DecoderKind) -> Result<Hypothesis> {
        if !self.supports(decoder) {
            return Err(Error::Config(format!("no {decoder} head attached")));
        }
        let start = Instant::now();
        let mut hyp = match decoder {
            DecoderKind::Ctc => {
                let logits = ctc_logits(enc, &self.model)?;
                ctc_greedy(&logits, &self.vocab)?
            }
            DecoderKind::Rnnt => {
                let w = RnntDecoderWeights::from_model(&self.model)?;
                rnnt_greedy(enc, &w, &self.vocab, MAX_SYMBOLS_PER_FRAME)?
            }
        };
        hyp.decode_seconds = start.elapsed().as_secs_f64();
        Ok(hyp)
    }

    pub fn transcribe(&self, audio: &AudioBuffer, decoder: DecoderKind) -> Result<Transcription> {
        if !self.supports(decoder) {
            return Err(Error::Config(format!("no {decoder} head attached")));
        }
        let start = Instant::now();
        let feats = self.features(audio)?;
        let frontend_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let enc = self.encode(&feats)?;
        drop(feats);
        let encoder_seconds = start.elapsed().as_secs_f64();
        let mut hypothesis = self.decode(&enc, decoder)?;
        hypothesis.encoder_seconds = encoder_seconds;
        Ok(Transcription {
            hypothesis,
            frontend_seconds,
        })
    }

    /// Decodes with both heads from a single encoder pass.
    pub fn transcribe_both(&self, audio: &AudioBuffer) -> Result<(Transcription, Transcription)> {
        let start = Instant::now();
        let feats = self.features(audio)?;
        let frontend_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let enc = self.encode(&feats)?;
        drop(feats);
        let encoder_seconds = start.elapsed().as_secs_f64();
        let mut out = Vec::with_capacity(2);
        for kind in [DecoderKind::Ctc, DecoderKind::Rnnt] {
            let mut hypothesis = self.decode(&enc, kind)?;
            hypothesis.encoder_seconds = encoder_seconds;
            out.push(Transcription {
                hypothesis,
                frontend_seconds,
            });
        }
        let rnnt = out.pop().expect("two decoders ran");
        let ctc = out.pop().expect("two decoders ran");
        Ok((ctc, rnnt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, Family, HeadSpec};
    use crate::frontend::synth_audio;

    fn pipeline(family: Family) -> Pipeline {
        let vocab = Vocab::characters();
        let model = EncoderModel::build(&EncoderConfig::toy(family), 1)
            .unwrap()
            .attach_heads(HeadSpec::both(vocab.len()), 1)
            .unwrap();
        Pipeline::new(model, vocab).unwrap()
    }

    #[test]
    fn both_heads_share_one_encoder_pass() {
        let p = pipeline(Family::ConvOnly);
        let audio = synth_audio(2.0, 3).unwrap();
        let (ctc, rnnt) = p.transcribe_both(&audio).unwrap();
        assert_eq!(p.model().forward_calls(), 1);
        assert_eq!(ctc.hypothesis, {
            let mut h = p.transcribe(&audio, DecoderKind::Ctc).unwrap().hypothesis;
            h.encoder_seconds = ctc.hypothesis.encoder_seconds;
            h.decode_seconds = ctc.hypothesis.decode_seconds;
            h
        });
        assert_eq!(rnnt.hypothesis.steps.frames, ctc.hypothesis.steps.frames);
        assert!(rnnt.hypothesis.steps.joint_evals >= ctc.hypothesis.steps.argmax_ops);
    }

    #[test]
    fn transcripts_are_deterministic() {
        let audio = synth_audio(1.5, 9).unwrap();
        for family in [Family::ConvSE, Family::ConformerLCAGT] {
            let a = pipeline(family).transcribe(&audio, DecoderKind::Rnnt).unwrap();
            let b = pipeline(family).transcribe(&audio, DecoderKind::Rnnt).unwrap();
            assert_eq!(a.hypothesis.token_ids, b.hypothesis.token_ids);
            assert_eq!(a.hypothesis.text, b.hypothesis.text);
        }
    }

    #[test]
    fn missing_heads_and_short_audio() {
        let model = EncoderModel::build(&EncoderConfig::toy(Family::ConvOnly), 1).unwrap();
        assert!(matches!(
            Pipeline::new(model, Vocab::characters()),
            Err(Error::Config(_))
        ));
        let p = pipeline(Family::ConvOnly);
        let short = AudioBuffer::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            p.transcribe(&short, DecoderKind::Ctc),
            Err(Error::AudioTooShort { .. })
        ));
        let few_frames = AudioBuffer::new(vec![0.0; 400 + 160], 16_000).unwrap();
        assert!(matches!(
            p.transcribe(&few_frames, DecoderKind::Ctc),
            Err(Error::InputTooShort { .. })
        ));
        assert_eq!("rnnt".parse::<DecoderKind>().unwrap(), DecoderKind::Rnnt);
        assert!("beam".parse::<DecoderKind>().is_err());
    }
}
