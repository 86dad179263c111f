//! Greedy CTC and RNNT decoding over a character vocabulary.

use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{self, argmax, linear, Tensor};

pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// Text tokens; the blank id is `len()`, one past the last token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Config(format!("token {i} is empty")));
            }
            if tokens[..i].contains(tok) {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocab { tokens })
    }

    /// `a`-`z`, space and apostrophe.
    pub fn characters() -> Self {
        let tokens = ('a'..='z').chain([' ', '\'']).map(String::from).collect();
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| Error::Internal(format!("token id {id} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCount {
    pub joint_evals: usize,
    pub frames: usize,
    pub argmax_ops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub encoder_seconds: f64,
    pub decode_seconds: f64,
    pub steps: StepCount,
}

impl Hypothesis {
    fn from_ids(token_ids: Vec<usize>, vocab: &Vocab, steps: StepCount) -> Result<Self> {
        let text = vocab.detokenize(&token_ids)?;
        Ok(Hypothesis {
            token_ids,
            text,
            encoder_seconds: 0.0,
            decode_seconds: 0.0,
            steps,
        })
    }
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy(logits: &Tensor, vocab: &Vocab) -> Result<Hypothesis> {
    let (t, classes) = logits.dims2()?;
    if classes != vocab.len() + 1 {
        return Err(Error::dim("ctc_greedy", "classes", vocab.len() + 1, classes));
    }
    let blank = vocab.blank_id();
    let mut ids = Vec::new();
    let mut prev = blank;
    for f in 0..t {
        let k = argmax(logits.row(f));
        if k != blank && k != prev {
            ids.push(k);
        }
        prev = k;
    }
    let steps = StepCount {
        joint_evals: 0,
        frames: t,
        argmax_ops: t,
    };
    Hypothesis::from_ids(ids, vocab, steps)
}

/// CTC projection of encoder output `[T', D]` to `[T', V+1]`.
pub fn ctc_logits(enc: &Tensor, model: &EncoderModel) -> Result<Tensor> {
    linear(enc, model.param("ctc.w")?, Some(model.param("ctc.b")?))
}

/// Prediction and joint network parameters. LSTM gate rows are stacked in
/// the order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct RnntDecoderWeights<'a> {
    pub embedding: &'a Tensor,
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_lstm: &'a Tensor,
    pub w_enc: &'a Tensor,
    pub w_pred: &'a Tensor,
    pub b_joint: &'a Tensor,
    pub w_out: &'a Tensor,
}

impl<'a> RnntDecoderWeights<'a> {
    pub fn from_model(model: &'a EncoderModel) -> Result<Self> {
        Ok(RnntDecoderWeights {
            embedding: model.param("rnnt.embed")?,
            w_ih: model.param("rnnt.lstm.w_ih")?,
            w_hh: model.param("rnnt.lstm.w_hh")?,
            b_lstm: model.param("rnnt.lstm.b")?,
            w_enc: model.param("rnnt.joint.w_enc")?,
            w_pred: model.param("rnnt.joint.w_pred")?,
            b_joint: model.param("rnnt.joint.b")?,
            w_out: model.param("rnnt.joint.w_out")?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn validate(&self, enc_dim: usize, vocab: &Vocab) -> Result<()> {
        const OP: &str = "rnnt_greedy";
        let (v, e) = self.embedding.dims2()?;
        let h = self.hidden_size();
        let (j, d) = self.w_enc.dims2()?;
        let checks = [
            ("vocab", vocab.len(), v),
            ("w_ih", 4 * h * e, self.w_ih.numel()),
            ("w_hh", 4 * h * h, self.w_hh.numel()),
            ("b_lstm", 4 * h, self.b_lstm.numel()),
            ("enc_dim", d, enc_dim),
            ("w_pred", j * h, self.w_pred.numel()),
            ("b_joint", j, self.b_joint.numel()),
            ("w_out", (v + 1) * j, self.w_out.numel()),
        ];
        for (axis, expected, got) in checks {
            if expected != got {
                return Err(Error::dim(OP, axis, expected, got));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// One prediction-network step. The blank id (or any id >= V) feeds the zero
/// embedding.
pub fn prediction_step(w: &RnntDecoderWeights<'_>, token: usize, state: &LstmState) -> LstmState {
    let h = w.hidden_size();
    let e = w.embedding.shape()[1];
    let zero = vec![0.0f32; e];
    let x = if token < w.vocab_size() {
        w.embedding.row(token)
    } else {
        &zero[..]
    };
    let mut gates = vec![0.0f32; 4 * h];
    tensor::linear_row(x, w.w_ih, Some(w.b_lstm), &mut gates);
    let mut rec = vec![0.0f32; 4 * h];
    tensor::linear_row(&state.h, w.w_hh, None, &mut rec);
    let mut next = LstmState::zeros(h);
    for k in 0..h {
        let i = tensor::sigmoid_scalar(gates[k] + rec[k]);
        let f = tensor::sigmoid_scalar(gates[h + k] + rec[h + k]);
        let g = (gates[2 * h + k] + rec[2 * h + k]).tanh();
        let o = tensor::sigmoid_scalar(gates[3 * h + k] + rec[3 * h + k]);
        next.c[k] = f * state.c[k] + i * g;
        next.h[k] = o * next.c[k].tanh();
    }
    next
}

/// `W_out * tanh(W_e * enc_t + W_p * pred_h + b)`.
pub fn joint(enc_t: &[f32], pred_h: &[f32], w: &RnntDecoderWeights<'_>) -> Vec<f32> {
    let j = w.b_joint.numel();
    let mut hidden = vec![0.0f32; j];
    tensor::linear_row(enc_t, w.w_enc, Some(w.b_joint), &mut hidden);
    let mut from_pred = vec![0.0f32; j];
    tensor::linear_row(pred_h, w.w_pred, None, &mut from_pred);
    for (a, b) in hidden.iter_mut().zip(&from_pred) {
        *a = (*a + b).tanh();
    }
    let mut out = vec![0.0f32; w.w_out.shape()[0]];
    tensor::linear_row(&hidden, w.w_out, None, &mut out);
    out
}

pub fn rnnt_greedy(
    enc: &Tensor,
    w: &RnntDecoderWeights<'_>,
    vocab: &Vocab,
    max_symbols_per_frame: usize,
) -> Result<Hypothesis> {
    rnnt_greedy_with(enc, w, vocab, max_symbols_per_frame, |e, h| joint(e, h, w))
}

/// Greedy transducer loop with a caller-supplied joint function.
pub fn rnnt_greedy_with(
    enc: &Tensor,
    w: &RnntDecoderWeights<'_>,
    vocab: &Vocab,
    max_symbols_per_frame: usize,
    mut joint_fn: impl FnMut(&[f32], &[f32]) -> Vec<f32>,
) -> Result<Hypothesis> {
    let (frames, d) = enc.dims2()?;
    w.validate(d, vocab)?;
    let blank = vocab.blank_id();
    let mut state = prediction_step(w, blank, &LstmState::zeros(w.hidden_size()));
    let mut ids = Vec::new();
    let mut steps = StepCount {
        frames,
        ..StepCount::default()
    };
    let mut t = 0;
    let mut emitted = 0;
    while t < frames {
        let logits = joint_fn(enc.row(t), &state.h);
        if logits.len() != blank + 1 {
            return Err(Error::dim("joint", "classes", blank + 1, logits.len()));
        }
        steps.joint_evals += 1;
        steps.argmax_ops += 1;
        let k = argmax(&logits);
        if k == blank || emitted == max_symbols_per_frame {
            t += 1;
            emitted = 0;
        } else {
            ids.push(k);
            emitted += 1;
            state = prediction_step(w, k, &state);
        }
    }
    Hypothesis::from_ids(ids, vocab, steps)
}

/// Joint evaluations and frames recorded while decoding `hyp`.
pub fn decode_step_count(hyp: &Hypothesis, frames: usize) -> Result<StepCount> {
    if hyp.steps.frames != frames {
        return Err(Error::Internal(format!(
            "hypothesis decoded {} frames, asked about {frames}",
            hyp.steps.frames
        )));
    }
    Ok(hyp.steps)
}
