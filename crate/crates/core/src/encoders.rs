//! Encoder families and their builders.
//!
//! * `ConvOnly`: two stride-2 separable stem layers, then residual
//!   `[separable conv (K=7) -> BN -> ReLU]` blocks. 4x downsampling.
//! * `ConvSE`: prolog, four segments of `[separable conv (K=5) -> BN -> SiLU ->
//!   SE]` residual blocks, widths doubling per segment; the first three
//!   segments end with a stride-2 separable layer. 8x downsampling.
//! * `ConvSECitrinet`: same block, uniform width, per-block kernels, stride-2
//!   layer at the start of segments 2-4.
//! * `Conformer*`: three stride-2 separable subsampling layers and a
//!   projection, then pre-norm Conformer blocks
//!   `x + FF/2, x + MHA, x + Conv, x + FF/2`, and a final layer norm.
//!
//! Models store parameters by name. Every tensor is initialized from its own
//! RNG stream derived from `(seed, name)`, so two families that share a
//! parameter name get identical values from the same seed.

use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, AttentionWeights};
use crate::error::{Error, Result};
use crate::frontend::N_MELS;
use crate::tensor::{
    self, batch_norm_in_place, depthwise_conv1d, depthwise_separable_conv1d, layer_norm, linear, pointwise_conv1d,
    Padding, Tensor, BATCH_NORM_EPS, LAYER_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    ConvOnly,
    ConvSE,
    ConvSECitrinet,
    ConformerFull,
    ConformerLCA,
    ConformerLCAGT,
}

impl Family {
    pub fn is_conformer(self) -> bool {
        matches!(
            self,
            Family::ConformerFull | Family::ConformerLCA | Family::ConformerLCAGT
        )
    }

    pub fn all() -> [Family; 6] {
        [
            Family::ConvOnly,
            Family::ConvSE,
            Family::ConvSECitrinet,
            Family::ConformerFull,
            Family::ConformerLCA,
            Family::ConformerLCAGT,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: Family,
    pub input_dim: usize,
    pub num_blocks: usize,
    /// Block width for `ConvOnly`/`ConvSECitrinet`, base width `c` for `ConvSE`.
    pub channels: usize,
    /// Width multiplier for `ConvSE`.
    pub alpha: f64,
    /// Stem width of `ConvOnly`, subsampling width of the Conformer families.
    pub stem_channels: usize,
    pub kernel_size: usize,
    /// Per-block kernels, `ConvSECitrinet` only.
    #[serde(default)]
    pub block_kernels: Vec<usize>,
    pub downsample_rate: usize,
    pub se_reduction: usize,
    pub model_dim: usize,
    pub ff_expansion: usize,
    pub attention: AttentionConfig,
}

impl EncoderConfig {
    /// Desk-scale configuration used by tests and the toy CLI presets.
    pub fn toy(family: Family) -> Self {
        let attention = AttentionConfig {
            use_global_token: family == Family::ConformerLCAGT,
            ..AttentionConfig::default()
        };
        let base = EncoderConfig {
            family,
            input_dim: N_MELS,
            num_blocks: 8,
            channels: 64,
            alpha: 1.0,
            stem_channels: 64,
            kernel_size: 7,
            block_kernels: Vec::new(),
            downsample_rate: 4,
            se_reduction: 8,
            model_dim: 64,
            ff_expansion: 4,
            attention,
        };
        match family {
            Family::ConvOnly => base,
            Family::ConvSE => EncoderConfig {
                channels: 8,
                kernel_size: 5,
                downsample_rate: 8,
                se_reduction: 4,
                ..base
            },
            Family::ConvSECitrinet => EncoderConfig {
                kernel_size: 5,
                block_kernels: vec![5, 5, 7, 7, 9, 9, 11, 11],
                downsample_rate: 8,
                ..base
            },
            _ => EncoderConfig {
                num_blocks: 4,
                kernel_size: 9,
                downsample_rate: 8,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.num_blocks == 0 || self.channels == 0 || self.kernel_size == 0 {
            return fail("input_dim, num_blocks, channels and kernel_size must be positive".into());
        }
        match self.family {
            Family::ConvOnly => {
                if self.kernel_size != 7 {
                    return fail(format!("ConvOnly kernel_size must be 7, got {}", self.kernel_size));
                }
                if self.downsample_rate != 4 {
                    return fail(format!(
                        "ConvOnly downsample_rate must be 4, got {}",
                        self.downsample_rate
                    ));
                }
                if self.stem_channels == 0 {
                    return fail("stem_channels must be positive".into());
                }
            }
            Family::ConvSE => {
                if self.kernel_size != 5 {
                    return fail(format!("ConvSE kernel_size must be 5, got {}", self.kernel_size));
                }
                if self.downsample_rate != 8 {
                    return fail(format!(
                        "ConvSE downsample_rate must be 8, got {}",
                        self.downsample_rate
                    ));
                }
                if self.num_blocks < 4 {
                    return fail(format!("ConvSE needs at least 4 blocks, got {}", self.num_blocks));
                }
                if self.alpha <= 0.0 || self.alpha.is_nan() {
                    return fail(format!("alpha must be positive, got {}", self.alpha));
                }
                for w in self.segment_widths() {
                    check_se(w, self.se_reduction)?;
                }
            }
            Family::ConvSECitrinet => {
                if self.downsample_rate != 8 {
                    return fail(format!(
                        "Citrinet downsample_rate must be 8, got {}",
                        self.downsample_rate
                    ));
                }
                if self.num_blocks < 4 {
                    return fail(format!("Citrinet needs at least 4 blocks, got {}", self.num_blocks));
                }
                if self.block_kernels.len() != self.num_blocks {
                    return fail(format!(
                        "block_kernels has {} entries for {} blocks",
                        self.block_kernels.len(),
                        self.num_blocks
                    ));
                }
                if self.block_kernels.contains(&0) {
                    return fail("block kernels must be positive".into());
                }
                check_se(self.channels, self.se_reduction)?;
            }
            Family::ConformerFull | Family::ConformerLCA | Family::ConformerLCAGT => {
                self.attention.validate()?;
                if self.downsample_rate != 8 {
                    return fail(format!(
                        "Conformer downsample_rate must be 8, got {}",
                        self.downsample_rate
                    ));
                }
                if self.model_dim != self.attention.model_dim() {
                    return fail(format!(
                        "model_dim {} != num_heads * head_dim = {}",
                        self.model_dim,
                        self.attention.model_dim()
                    ));
                }
                if self.attention.use_global_token != (self.family == Family::ConformerLCAGT) {
                    return fail("use_global_token must be set exactly for ConformerLCAGT".into());
                }
                if self.stem_channels == 0 || self.ff_expansion == 0 {
                    return fail("stem_channels and ff_expansion must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Blocks per segment for the four-segment families; earlier segments take
    /// the remainder.
    pub fn segment_sizes(&self) -> [usize; 4] {
        let base = self.num_blocks / 4;
        let extra = self.num_blocks % 4;
        std::array::from_fn(|s| base + usize::from(s < extra))
    }

    /// `[c, 2c, 4c, 8c] * alpha` for `ConvSE`; uniform for Citrinet.
    pub fn segment_widths(&self) -> [usize; 4] {
        match self.family {
            Family::ConvSE => {
                std::array::from_fn(|s| ((self.channels as f64) * self.alpha * (1usize << s) as f64).round() as usize)
            }
            _ => [self.channels; 4],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.family {
            Family::ConvOnly | Family::ConvSECitrinet => self.channels,
            Family::ConvSE => self.segment_widths()[3],
            _ => self.model_dim,
        }
    }

    /// Encoder frames for `t` input frames (every stride-2 layer uses "same"
    /// padding, so each halves with ceiling).
    pub fn output_len(&self, t: usize) -> usize {
        let halvings = self.downsample_rate.trailing_zeros();
        (0..halvings).fold(t, |n, _| n.div_ceil(2))
    }

    pub fn min_input_frames(&self) -> usize {
        self.downsample_rate
    }
}

fn check_se(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "SE reduction {reduction} does not divide channel count {channels}"
        )));
    }
    Ok(())
}

/// Output/input vocabulary sizes and decoder widths of attached heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub ctc: bool,
    pub rnnt: bool,
    pub vocab_size: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
}

impl HeadSpec {
    pub fn both(vocab_size: usize) -> Self {
        HeadSpec {
            ctc: true,
            rnnt: true,
            vocab_size,
            pred_dim: 64,
            joint_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Ones,
    Zeros,
    Uniform { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.push(name, shape, Init::Uniform { fan_in });
    }

    fn separable(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.uniform(format!("{prefix}.dw"), &[c_in, k], k);
        self.uniform(format!("{prefix}.pw"), &[c_out, c_in], c_in);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.bn.gamma"), &[c], Init::Ones);
        self.push(format!("{prefix}.bn.beta"), &[c], Init::Zeros);
        self.push(format!("{prefix}.bn.mean"), &[c], Init::Zeros);
        self.push(format!("{prefix}.bn.var"), &[c], Init::Ones);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.ln.gamma"), &[d], Init::Ones);
        self.push(format!("{prefix}.ln.beta"), &[d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.uniform(format!("{prefix}.w"), &[d_out, d_in], d_in);
        self.uniform(format!("{prefix}.b"), &[d_out], d_in);
    }

    fn se(&mut self, prefix: &str, c: usize, r: usize) {
        self.linear(&format!("{prefix}.se.fc1"), c, c / r);
        self.linear(&format!("{prefix}.se.fc2"), c / r, c);
    }
}

/// Parameter list of the encoder body (no heads) for a validated config.
pub fn encoder_param_specs(cfg: &EncoderConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut s = SpecList::default();
    let k = cfg.kernel_size;
    match cfg.family {
        Family::ConvOnly => {
            let (stem, c) = (cfg.stem_channels, cfg.channels);
            s.separable("stem.0", cfg.input_dim, stem, k);
            s.batch_norm("stem.0", stem);
            s.separable("stem.1", stem, c, k);
            s.batch_norm("stem.1", c);
            for b in 0..cfg.num_blocks {
                let p = format!("blocks.{b}");
                s.separable(&p, c, c, k);
                s.batch_norm(&p, c);
            }
        }
        Family::ConvSE => {
            let widths = cfg.segment_widths();
            s.separable("prolog", cfg.input_dim, widths[0], k);
            s.batch_norm("prolog", widths[0]);
            for (seg, &n) in cfg.segment_sizes().iter().enumerate() {
                let w = widths[seg];
                for b in 0..n {
                    let p = format!("seg{seg}.block{b}");
                    s.separable(&p, w, w, k);
                    s.batch_norm(&p, w);
                    s.se(&p, w, cfg.se_reduction);
                }
                if seg < 3 {
                    let p = format!("seg{seg}.down");
                    s.separable(&p, w, widths[seg + 1], k);
                    s.batch_norm(&p, widths[seg + 1]);
                }
            }
        }
        Family::ConvSECitrinet => {
            let c = cfg.channels;
            s.separable("prolog", cfg.input_dim, c, k);
            s.batch_norm("prolog", c);
            let mut kernels = cfg.block_kernels.iter().copied();
            for (seg, &n) in cfg.segment_sizes().iter().enumerate() {
                let seg_kernels: Vec<usize> = kernels.by_ref().take(n).collect();
                if seg > 0 {
                    let p = format!("seg{seg}.down");
                    s.separable(&p, c, c, seg_kernels[0]);
                    s.batch_norm(&p, c);
                }
                for (b, &kb) in seg_kernels.iter().enumerate() {
                    let p = format!("seg{seg}.block{b}");
                    s.separable(&p, c, c, kb);
                    s.batch_norm(&p, c);
                    s.se(&p, c, cfg.se_reduction);
                }
            }
        }
        Family::ConformerFull | Family::ConformerLCA | Family::ConformerLCAGT => {
            let (d, sc, f) = (cfg.model_dim, cfg.stem_channels, cfg.ff_expansion);
            s.separable("subsample.0", cfg.input_dim, sc, k);
            s.separable("subsample.1", sc, sc, k);
            s.separable("subsample.2", sc, sc, k);
            s.linear("subsample.proj", sc, d);
            for b in 0..cfg.num_blocks {
                let p = format!("blocks.{b}");
                for ff in ["ff1", "ff2"] {
                    let q = format!("{p}.{ff}");
                    s.layer_norm(&q, d);
                    s.linear(&format!("{q}.fc1"), d, f * d);
                    s.linear(&format!("{q}.fc2"), f * d, d);
                }
                let a = format!("{p}.attn");
                s.layer_norm(&a, d);
                for proj in ["q", "k", "v", "o"] {
                    s.linear(&format!("{a}.{proj}"), d, d);
                }
                if cfg.attention.use_global_token {
                    s.uniform(format!("{a}.global"), &[d], d);
                }
                let c = format!("{p}.conv");
                s.layer_norm(&c, d);
                s.linear(&format!("{c}.pw1"), d, 2 * d);
                s.uniform(format!("{c}.dw.w"), &[d, k], k);
                s.uniform(format!("{c}.dw.b"), &[d], k);
                s.batch_norm(&c, d);
                s.linear(&format!("{c}.pw2"), d, d);
            }
            s.layer_norm("final", d);
        }
    }
    // Reorder so that each block's parameters appear together in file order.
    let mut specs = s.0;
    if cfg.family.is_conformer() {
        specs.sort_by_key(|p| conformer_order(&p.name));
    }
    Ok(specs)
}

fn conformer_order(name: &str) -> (usize, usize, usize) {
    let section = ["ff1", "attn", "conv", "ff2"];
    match name.strip_prefix("blocks.") {
        Some(rest) => {
            let (idx, tail) = rest.split_once('.').unwrap_or((rest, ""));
            let block = idx.parse::<usize>().unwrap_or(0);
            let sub = section.iter().position(|s| tail.starts_with(s)).unwrap_or(0);
            (1, block, sub)
        }
        None if name.starts_with("final") => (2, 0, 0),
        None => (0, 0, 0),
    }
}

pub fn head_param_specs(d_model: usize, heads: &HeadSpec) -> Result<Vec<ParamSpec>> {
    if !heads.ctc && !heads.rnnt {
        return Err(Error::Config("at least one decoder head must be attached".into()));
    }
    if heads.vocab_size == 0 {
        return Err(Error::Config("vocab_size must be positive".into()));
    }
    let v = heads.vocab_size;
    let mut s = SpecList::default();
    if heads.ctc {
        s.linear("ctc", d_model, v + 1);
    }
    if heads.rnnt {
        if heads.pred_dim == 0 || heads.joint_dim == 0 {
            return Err(Error::Config("pred_dim and joint_dim must be positive".into()));
        }
        let (h, j) = (heads.pred_dim, heads.joint_dim);
        s.uniform("rnnt.embed".into(), &[v, h], 1);
        s.uniform("rnnt.lstm.w_ih".into(), &[4 * h, h], h);
        s.uniform("rnnt.lstm.w_hh".into(), &[4 * h, h], h);
        s.uniform("rnnt.lstm.b".into(), &[4 * h], h);
        s.uniform("rnnt.joint.w_enc".into(), &[j, d_model], d_model);
        s.uniform("rnnt.joint.w_pred".into(), &[j, h], h);
        s.uniform("rnnt.joint.b".into(), &[j], d_model);
        s.uniform("rnnt.joint.w_out".into(), &[v + 1, j], j);
    }
    Ok(s.0)
}

/// Total parameters of the encoder body, computed from shapes only.
pub fn analytic_parameter_count(cfg: &EncoderConfig) -> Result<usize> {
    Ok(encoder_param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn init_param(spec: &ParamSpec, seed: u64) -> Tensor {
    match spec.init {
        Init::Ones => Tensor::full(&spec.shape, 1.0),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..=bound))
        }
    }
}

/// Gate applied by squeeze-and-excitation during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SeGate {
    Learned,
    Constant(f32),
}

/// Squeeze-and-excitation parameters; `fc1` is `[C/r, C]`, `fc2` is `[C, C/r]`.
#[derive(Clone, Copy, Debug)]
pub struct SeWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Channel gains `sigmoid(fc2(silu(fc1(mean_t x))))` for `x: [C, T]`.
pub fn se_gains(x: &Tensor, w: &SeWeights<'_>) -> Result<Vec<f32>> {
    let (c, t) = x.dims2()?;
    let (hidden, wc) = w.w1.dims2()?;
    if wc != c {
        return Err(Error::dim("se_module", "channels", c, wc));
    }
    if w.w2.shape() != [c, hidden] {
        return Err(Error::dim("se_module", "fc2", c * hidden, w.w2.numel()));
    }
    let squeezed: Vec<f32> = (0..c)
        .map(|ch| (x.row(ch).iter().map(|&v| v as f64).sum::<f64>() / t as f64) as f32)
        .collect();
    let mut z = vec![0.0f32; hidden];
    tensor::linear_row(&squeezed, w.w1, Some(w.b1), &mut z);
    z.iter_mut().for_each(|v| *v = tensor::silu_scalar(*v));
    let mut g = vec![0.0f32; c];
    tensor::linear_row(&z, w.w2, Some(w.b2), &mut g);
    g.iter_mut().for_each(|v| *v = tensor::sigmoid_scalar(*v));
    Ok(g)
}

fn scale_channels(mut x: Tensor, gains: &[f32]) -> Tensor {
    let t = x.shape()[1];
    for (ch, g) in gains.iter().enumerate() {
        x.data_mut()[ch * t..(ch + 1) * t].iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Squeeze-and-excitation over `x: [C, T]`.
pub fn se_module(x: &Tensor, w: &SeWeights<'_>) -> Result<Tensor> {
    let gains = se_gains(x, w)?;
    Ok(scale_channels(x.clone(), &gains))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Relu,
    Silu,
}

impl Act {
    fn apply(self, x: Tensor) -> Tensor {
        match self {
            Act::Relu => x.map_in_place(tensor::relu_scalar),
            Act::Silu => x.map_in_place(tensor::silu_scalar),
        }
    }
}

pub struct EncoderModel {
    config: EncoderConfig,
    params: IndexMap<String, Tensor>,
    heads: Option<HeadSpec>,
    forward_calls: AtomicUsize,
}

impl Clone for EncoderModel {
    fn clone(&self) -> Self {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.clone(),
            heads: self.heads,
            forward_calls: AtomicUsize::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for EncoderModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderModel")
            .field("family", &self.config.family)
            .field("parameters", &self.parameter_count())
            .field("heads", &self.heads)
            .finish()
    }
}

impl EncoderModel {
    /// Builds any family from `cfg` with seeded uniform initialization.
    pub fn build(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let params = encoder_param_specs(cfg)?
            .iter()
            .map(|spec| (spec.name.clone(), init_param(spec, seed)))
            .collect();
        Ok(EncoderModel {
            config: cfg.clone(),
            params,
            heads: None,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn heads(&self) -> Option<&HeadSpec> {
        self.heads.as_ref()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter `{name}`")))
    }

    /// Replaces an existing parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Weights(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Encodes `feats: [T, input_dim]` into `[T', D]`.
    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        self.forward_with(feats, SeGate::Learned)
    }

    pub fn forward_with(&self, feats: &Tensor, gate: SeGate) -> Result<Tensor> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let (t, dim) = feats.dims2()?;
        if dim != self.config.input_dim {
            return Err(Error::dim("encoder", "features", self.config.input_dim, dim));
        }
        if t < self.config.min_input_frames() {
            return Err(Error::InputTooShort {
                frames: t,
                min: self.config.min_input_frames(),
            });
        }
        match self.config.family {
            Family::ConvOnly => self.quartznet_forward(feats),
            Family::ConvSE => self.contextnet_forward(feats, gate),
            Family::ConvSECitrinet => self.citrinet_forward(feats, gate),
            _ => self.conformer_forward(feats),
        }
    }

    fn p(&self, name: &str) -> &Tensor {
        // Names are generated from the same spec list the builder used.
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from a validated model"))
    }

    fn separable(&self, x: &Tensor, prefix: &str, stride: usize) -> Result<Tensor> {
        depthwise_separable_conv1d(
            x,
            self.p(&format!("{prefix}.dw")),
            self.p(&format!("{prefix}.pw")),
            stride,
            Padding::Same,
        )
    }

    fn batch_norm(&self, x: Tensor, prefix: &str) -> Result<Tensor> {
        batch_norm_in_place(
            x,
            self.p(&format!("{prefix}.bn.gamma")),
            self.p(&format!("{prefix}.bn.beta")),
            self.p(&format!("{prefix}.bn.mean")),
            self.p(&format!("{prefix}.bn.var")),
            BATCH_NORM_EPS,
        )
    }

    /// Separable conv -> BN -> activation, without residual.
    fn conv_bn_act(&self, x: &Tensor, prefix: &str, stride: usize, act: Act) -> Result<Tensor> {
        let y = self.separable(x, prefix, stride)?;
        Ok(act.apply(self.batch_norm(y, prefix)?))
    }

    fn se_weights(&self, prefix: &str) -> SeWeights<'_> {
        SeWeights {
            w1: self.p(&format!("{prefix}.se.fc1.w")),
            b1: self.p(&format!("{prefix}.se.fc1.b")),
            w2: self.p(&format!("{prefix}.se.fc2.w")),
            b2: self.p(&format!("{prefix}.se.fc2.b")),
        }
    }

    /// `x + act(BN(conv(x)))`, optionally SE-gated before the residual sum.
    fn residual_block(&self, mut x: Tensor, prefix: &str, act: Act, se: Option<SeGate>) -> Result<Tensor> {
        let mut y = self.conv_bn_act(&x, prefix, 1, act)?;
        match se {
            None => {}
            Some(SeGate::Learned) => {
                let gains = se_gains(&y, &self.se_weights(prefix))?;
                y = scale_channels(y, &gains);
            }
            Some(SeGate::Constant(g)) => y = y.map_in_place(|v| v * g),
        }
        x.add_assign(&y, 1.0)?;
        Ok(x)
    }

    fn quartznet_forward(&self, feats: &Tensor) -> Result<Tensor> {
        let mut x = feats.transpose2()?;
        x = self.conv_bn_act(&x, "stem.0", 2, Act::Relu)?;
        x = self.conv_bn_act(&x, "stem.1", 2, Act::Relu)?;
        for b in 0..self.config.num_blocks {
            x = self.residual_block(x, &format!("blocks.{b}"), Act::Relu, None)?;
        }
        x.transpose2()
    }

    fn contextnet_forward(&self, feats: &Tensor, gate: SeGate) -> Result<Tensor> {
        let mut x = feats.transpose2()?;
        x = self.conv_bn_act(&x, "prolog", 1, Act::Silu)?;
        for (seg, &n) in self.config.segment_sizes().iter().enumerate() {
            for b in 0..n {
                x = self.residual_block(x, &format!("seg{seg}.block{b}"), Act::Silu, Some(gate))?;
            }
            if seg < 3 {
                x = self.conv_bn_act(&x, &format!("seg{seg}.down"), 2, Act::Silu)?;
            }
        }
        x.transpose2()
    }

    fn citrinet_forward(&self, feats: &Tensor, gate: SeGate) -> Result<Tensor> {
        let mut x = feats.transpose2()?;
        x = self.conv_bn_act(&x, "prolog", 1, Act::Silu)?;
        for (seg, &n) in self.config.segment_sizes().iter().enumerate() {
            if seg > 0 {
                x = self.conv_bn_act(&x, &format!("seg{seg}.down"), 2, Act::Silu)?;
            }
            for b in 0..n {
                x = self.residual_block(x, &format!("seg{seg}.block{b}"), Act::Silu, Some(gate))?;
            }
        }
        x.transpose2()
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        layer_norm(
            x,
            self.p(&format!("{prefix}.ln.gamma")),
            self.p(&format!("{prefix}.ln.beta")),
            LAYER_NORM_EPS,
        )
    }

    fn lin(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        linear(x, self.p(&format!("{prefix}.w")), Some(self.p(&format!("{prefix}.b"))))
    }

    fn conformer_subsample(&self, feats: &Tensor) -> Result<Tensor> {
        let mut x = feats.transpose2()?;
        for i in 0..3 {
            x = Act::Relu.apply(self.separable(&x, &format!("subsample.{i}"), 2)?);
        }
        let xt = x.transpose2()?;
        drop(x);
        let mut h = self.lin(&xt, "subsample.proj")?;
        drop(xt);
        add_sinusoidal_positions(&mut h);
        Ok(h)
    }

    fn feed_forward(&self, mut h: Tensor, prefix: &str) -> Result<Tensor> {
        let ln = self.layer_norm(&h, prefix)?;
        let a = self.lin(&ln, &format!("{prefix}.fc1"))?;
        drop(ln);
        let a = Act::Silu.apply(a);
        let out = self.lin(&a, &format!("{prefix}.fc2"))?;
        drop(a);
        h.add_assign(&out, 0.5)?;
        Ok(h)
    }

    pub(crate) fn attention_weights(&self, prefix: &str) -> AttentionWeights<'_> {
        AttentionWeights {
            w_q: self.p(&format!("{prefix}.q.w")),
            b_q: self.p(&format!("{prefix}.q.b")),
            w_k: self.p(&format!("{prefix}.k.w")),
            b_k: self.p(&format!("{prefix}.k.b")),
            w_v: self.p(&format!("{prefix}.v.w")),
            b_v: self.p(&format!("{prefix}.v.b")),
            w_o: self.p(&format!("{prefix}.o.w")),
            b_o: self.p(&format!("{prefix}.o.b")),
            global_token: self.params.get(&format!("{prefix}.global")),
        }
    }

    fn self_attention(&self, mut h: Tensor, prefix: &str) -> Result<Tensor> {
        let ln = self.layer_norm(&h, prefix)?;
        let w = self.attention_weights(prefix);
        let cfg = &self.config.attention;
        let y = match self.config.family {
            Family::ConformerFull => attention::mha_full(&ln, &w, cfg)?,
            Family::ConformerLCA => attention::lca_chunked(&ln, &w, cfg)?,
            Family::ConformerLCAGT => attention::lca_global_token(&ln, &w, cfg)?,
            other => return Err(Error::Internal(format!("{other:?} has no attention"))),
        };
        drop(ln);
        h.add_assign(&y, 1.0)?;
        Ok(h)
    }

    /// Pointwise -> GLU -> depthwise -> BN -> SiLU -> pointwise, residual.
    fn conv_module(&self, mut h: Tensor, prefix: &str) -> Result<Tensor> {
        let d = self.config.model_dim;
        let ln = self.layer_norm(&h, prefix)?;
        let x = ln.transpose2()?;
        drop(ln);
        let p = pointwise_conv1d(
            &x,
            self.p(&format!("{prefix}.pw1.w")),
            Some(self.p(&format!("{prefix}.pw1.b"))),
        )?;
        drop(x);
        let t = p.shape()[1];
        let gated = {
            let pd = p.data();
            Tensor::from_fn(&[d, t], |i| pd[i] * tensor::sigmoid_scalar(pd[d * t + i]))
        };
        drop(p);
        let y = depthwise_conv1d(
            &gated,
            self.p(&format!("{prefix}.dw.w")),
            Some(self.p(&format!("{prefix}.dw.b"))),
            1,
            Padding::Same,
        )?;
        drop(gated);
        let y = Act::Silu.apply(self.batch_norm(y, prefix)?);
        let o = pointwise_conv1d(
            &y,
            self.p(&format!("{prefix}.pw2.w")),
            Some(self.p(&format!("{prefix}.pw2.b"))),
        )?;
        drop(y);
        let ot = o.transpose2()?;
        drop(o);
        h.add_assign(&ot, 1.0)?;
        Ok(h)
    }

    fn conformer_block(&self, h: Tensor, b: usize) -> Result<Tensor> {
        let p = format!("blocks.{b}");
        let h = self.feed_forward(h, &format!("{p}.ff1"))?;
        let h = self.self_attention(h, &format!("{p}.attn"))?;
        let h = self.conv_module(h, &format!("{p}.conv"))?;
        self.feed_forward(h, &format!("{p}.ff2"))
    }

    fn conformer_forward(&self, feats: &Tensor) -> Result<Tensor> {
        let mut h = self.conformer_subsample(feats)?;
        for b in 0..self.config.num_blocks {
            h = self.conformer_block(h, b)?;
        }
        self.layer_norm(&h, "final")
    }

    /// Adds decoder heads sharing this encoder.
    pub fn attach_heads(mut self, heads: HeadSpec, seed: u64) -> Result<Self> {
        if self.heads.is_some() {
            return Err(Error::Config("heads already attached".into()));
        }
        for spec in head_param_specs(self.config.output_dim(), &heads)? {
            let t = init_param(&spec, seed);
            self.params.insert(spec.name, t);
        }
        self.heads = Some(heads);
        Ok(self)
    }
}

/// `pe[t, 2i] = sin(t / 10000^(2i/D))`, `pe[t, 2i+1] = cos(...)`, added in place.
pub fn add_sinusoidal_positions(h: &mut Tensor) {
    let (t, d) = (h.shape()[0], h.shape()[1]);
    let data = h.data_mut();
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let freq = (10000f64).powf(-(i as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] += angle.sin() as f32;
            if i + 1 < d {
                data[pos * d + i + 1] += angle.cos() as f32;
            }
        }
    }
}

pub fn build_quartznet2(cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    expect_family(cfg, &[Family::ConvOnly])?;
    EncoderModel::build(cfg, seed)
}

pub fn quartznet2_forward(m: &EncoderModel, feats: &Tensor) -> Result<Tensor> {
    expect_family(m.config(), &[Family::ConvOnly])?;
    m.forward(feats)
}

pub fn build_contextnet(cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    expect_family(cfg, &[Family::ConvSE])?;
    EncoderModel::build(cfg, seed)
}

pub fn contextnet_forward(m: &EncoderModel, feats: &Tensor) -> Result<Tensor> {
    expect_family(m.config(), &[Family::ConvSE, Family::ConvSECitrinet])?;
    m.forward(feats)
}

pub fn build_citrinet(cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    expect_family(cfg, &[Family::ConvSECitrinet])?;
    EncoderModel::build(cfg, seed)
}

pub fn build_fast_conformer(cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    expect_family(
        cfg,
        &[Family::ConformerFull, Family::ConformerLCA, Family::ConformerLCAGT],
    )?;
    EncoderModel::build(cfg, seed)
}

pub fn conformer_forward(m: &EncoderModel, feats: &Tensor) -> Result<Tensor> {
    if !m.config().family.is_conformer() {
        return Err(Error::Config(format!(
            "{:?} is not a Conformer family",
            m.config().family
        )));
    }
    m.forward(feats)
}

pub fn attach_heads(m: EncoderModel, heads: HeadSpec, seed: u64) -> Result<EncoderModel> {
    m.attach_heads(heads, seed)
}

fn expect_family(cfg: &EncoderConfig, allowed: &[Family]) -> Result<()> {
    if allowed.contains(&cfg.family) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "expected family {allowed:?}, got {:?}",
            cfg.family
        )))
    }
}
