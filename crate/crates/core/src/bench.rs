//! Real-time-factor measurement, duration sweeps, the analytic activation
//! memory model and maximum single-pass duration search.

use std::sync::Mutex;
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::encoders::{EncoderConfig, Family};
use crate::error::{Error, Result};
use crate::frontend::{frame_count, synth_audio, AudioBuffer, HOP_SAMPLES, SAMPLE_RATE, WINDOW_SAMPLES};
use crate::memory::track_measured_peak;
use crate::pipeline::{DecoderKind, Pipeline};

pub const BYTES_PER_ELEMENT: u64 = 4;
pub const TIMING_RUNS: usize = 3;
pub const DEFAULT_BUDGET_BYTES: u64 = 48 << 30;
pub const CSV_HEADER: &str = "duration_s,wall_s,rtf,predicted_peak_bytes,measured_peak_bytes,decoder";

/// Timed sections never overlap, even across threads.
static TIMING: Mutex<()> = Mutex::new(());

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSample {
    pub duration_s: f64,
    pub wall_s: f64,
    pub rtf: f64,
    pub predicted_peak_bytes: u64,
    pub measured_peak_bytes: u64,
    pub decoder: DecoderKind,
    #[serde(skip)]
    pub transcript: String,
    #[serde(skip)]
    pub joint_evals: usize,
    #[serde(skip)]
    pub encoder_frames: usize,
    #[serde(skip)]
    pub emissions: usize,
}

impl BenchSample {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.duration_s, self.wall_s, self.rtf, self.predicted_peak_bytes, self.measured_peak_bytes, self.decoder
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub samples: Vec<BenchSample>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Caller holds the timing lock.
fn timed_sample(pipeline: &Pipeline, decoder: DecoderKind, audio: &AudioBuffer) -> Result<BenchSample> {
    let duration_s = audio.duration_seconds();
    let mut walls = Vec::with_capacity(TIMING_RUNS);
    let mut first: Option<(String, usize, usize, usize)> = None;
    let mut measured = 0;
    for _ in 0..TIMING_RUNS {
        let start = Instant::now();
        let (out, peak) = track_measured_peak(|| pipeline.transcribe(audio, decoder));
        let wall = start.elapsed().as_secs_f64();
        let hyp = out?.hypothesis;
        walls.push(wall);
        measured = measured.max(peak);
        match &first {
            None => first = Some((hyp.text, hyp.steps.joint_evals, hyp.steps.frames, hyp.token_ids.len())),
            Some((text, _, _, _)) if *text != hyp.text => {
                return Err(Error::Internal("repeated runs produced different transcripts".into()));
            }
            Some(_) => {}
        }
    }
    let (transcript, joint_evals, encoder_frames, emissions) = first.expect("at least one run");
    let wall_s = median(walls);
    let frames = frame_count(audio.samples().len()).unwrap_or(0);
    Ok(BenchSample {
        duration_s,
        wall_s,
        rtf: wall_s / duration_s,
        predicted_peak_bytes: predict_peak_bytes(pipeline.model().config(), frames),
        measured_peak_bytes: measured,
        decoder,
        transcript,
        joint_evals,
        encoder_frames,
        emissions,
    })
}

fn timing_guard() -> std::sync::MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Median wall time over repeated front-end + encoder + decoder runs.
pub fn measure_rtf(pipeline: &Pipeline, decoder: DecoderKind, audio: &AudioBuffer) -> Result<BenchSample> {
    let _guard = timing_guard();
    timed_sample(pipeline, decoder, audio)
}

fn check_durations(durations: &[f64]) -> Result<()> {
    if durations.is_empty() {
        return Err(Error::Config("no durations given".into()));
    }
    if durations.iter().any(|d| *d <= 0.0 || !d.is_finite()) {
        return Err(Error::Config("durations must be positive".into()));
    }
    if durations.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("durations must be sorted ascending".into()));
    }
    Ok(())
}

/// One sample per duration on synthetic audio.
pub fn sweep_rtf(pipeline: &Pipeline, decoder: DecoderKind, durations: &[f64], seed: u64) -> Result<BenchReport> {
    check_durations(durations)?;
    let _guard = timing_guard();
    let mut samples = Vec::with_capacity(durations.len());
    for &d in durations {
        let audio = synth_audio(d, seed)?;
        let s = timed_sample(pipeline, decoder, &audio)?;
        info!("{d} s: wall {:.3} s, rtf {:.5}", s.wall_s, s.rtf);
        samples.push(s);
    }
    Ok(BenchReport { samples })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceRow {
    pub duration_s: f64,
    pub ctc_wall_s: f64,
    pub rnnt_wall_s: f64,
    pub ratio: f64,
    pub encoder_frames: usize,
    pub joint_evals: usize,
    pub emissions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub rows: Vec<DivergenceRow>,
}

impl DivergenceReport {
    pub fn ratio_non_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].ratio >= w[0].ratio)
    }
}

/// RNNT/CTC wall-time ratio per duration for one encoder carrying both heads.
pub fn ctc_rnnt_divergence(pipeline: &Pipeline, durations: &[f64], seed: u64) -> Result<DivergenceReport> {
    check_durations(durations)?;
    if !pipeline.supports(DecoderKind::Ctc) || !pipeline.supports(DecoderKind::Rnnt) {
        return Err(Error::Config("divergence needs both CTC and RNNT heads".into()));
    }
    let _guard = timing_guard();
    let mut rows = Vec::with_capacity(durations.len());
    for &d in durations {
        let audio = synth_audio(d, seed)?;
        let ctc = timed_sample(pipeline, DecoderKind::Ctc, &audio)?;
        let rnnt = timed_sample(pipeline, DecoderKind::Rnnt, &audio)?;
        let row = DivergenceRow {
            duration_s: d,
            ctc_wall_s: ctc.wall_s,
            rnnt_wall_s: rnnt.wall_s,
            ratio: rnnt.wall_s / ctc.wall_s,
            encoder_frames: rnnt.encoder_frames,
            joint_evals: rnnt.joint_evals,
            emissions: rnnt.emissions,
        };
        info!("{d} s: rnnt/ctc {:.3}", row.ratio);
        rows.push(row);
    }
    Ok(DivergenceReport { rows })
}

/// Live-element bookkeeping that replays an encoder's allocation order.
#[derive(Default)]
struct Replay {
    live: u128,
    peak: u128,
}

impl Replay {
    fn alloc(&mut self, n: u128) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, n: u128) {
        self.live -= n;
    }

    /// `new = f(old)`: output allocated while the input is alive.
    fn replace(&mut self, old: u128, new: u128) {
        self.alloc(new);
        self.free(old);
    }

    /// A temporary that lives only while it is being produced and consumed.
    fn transient(&mut self, n: u128) {
        self.alloc(n);
        self.free(n);
    }
}

fn halve(t: u128) -> u128 {
    t.div_ceil(2)
}

fn conv_stack(cfg: &EncoderConfig, t: u128, r: &mut Replay) {
    let input = cfg.input_dim as u128 * t;
    // features, then their channel-major copy
    r.alloc(input);
    r.alloc(input);
    match cfg.family {
        Family::ConvOnly => {
            let (s, c) = (cfg.stem_channels as u128, cfg.channels as u128);
            let (t1, t2) = (halve(t), halve(halve(t)));
            r.replace(input, s * t1);
            r.replace(s * t1, c * t2);
            r.transient(c * t2);
            r.replace(c * t2, c * t2);
        }
        Family::ConvSE | Family::ConvSECitrinet => {
            let widths = cfg.segment_widths().map(|w| w as u128);
            let mut len = t;
            r.replace(input, widths[0] * len);
            for seg in 0..4 {
                r.transient(widths[seg] * len);
                if seg < 3 {
                    let next = halve(len);
                    r.replace(widths[seg] * len, widths[seg + 1] * next);
                    len = next;
                }
            }
            r.replace(widths[3] * len, widths[3] * len);
        }
        _ => unreachable!("conformer families are replayed separately"),
    }
}

fn conformer_stack(cfg: &EncoderConfig, t: u128, r: &mut Replay) {
    let input = cfg.input_dim as u128 * t;
    let (sc, d, f) = (
        cfg.stem_channels as u128,
        cfg.model_dim as u128,
        cfg.ff_expansion as u128,
    );
    r.alloc(input);
    r.alloc(input);
    let mut len = t;
    let mut cur = input;
    for _ in 0..3 {
        len = halve(len);
        r.replace(cur, sc * len);
        cur = sc * len;
    }
    r.replace(cur, cur);
    r.replace(cur, d * len);
    let td = d * len;
    let a = &cfg.attention;
    let heads = a.num_heads as u128;
    let scores = match cfg.family {
        Family::ConformerFull => heads * len * len,
        _ => {
            let chunk = a.chunk_size() as u128;
            let width = chunk + (a.left_context + a.right_context) as u128 + u128::from(a.use_global_token);
            heads * len.div_ceil(chunk) * chunk * width
        }
    };
    let feed_forward = |r: &mut Replay| {
        r.alloc(td);
        r.alloc(f * td);
        r.free(td);
        r.transient(td);
        r.free(f * td);
    };
    for _ in 0..cfg.num_blocks {
        feed_forward(r);
        // ln; q, k and scores; v and context replace q and k; output projection
        r.alloc(td);
        r.alloc(2 * td + scores);
        r.free(2 * td);
        r.alloc(2 * td);
        r.free(scores + td);
        r.alloc(td);
        r.free(3 * td);
        // conv module: ln, transpose, pointwise 2D, GLU, depthwise, pointwise, transpose
        r.alloc(td);
        r.replace(td, td);
        r.replace(td, 2 * td);
        r.replace(2 * td, td);
        r.replace(td, td);
        r.replace(td, td);
        r.replace(td, td);
        r.free(td);
        feed_forward(r);
    }
    r.replace(td, td);
}

/// Peak live activation bytes of one encoder forward pass over `t_frames`
/// feature frames, input features included and weights excluded.
pub fn predict_peak_bytes(cfg: &EncoderConfig, t_frames: usize) -> u64 {
    let t = t_frames.max(1) as u128;
    let mut r = Replay::default();
    if cfg.family.is_conformer() {
        conformer_stack(cfg, t, &mut r);
    } else {
        conv_stack(cfg, t, &mut r);
    }
    let bytes = r.peak * BYTES_PER_ELEMENT as u128;
    u64::try_from(bytes).unwrap_or(u64::MAX)
}

/// Feature frames for `seconds` of audio.
pub fn frames_for_seconds(seconds: u64) -> usize {
    let samples = seconds as usize * SAMPLE_RATE as usize;
    if samples < WINDOW_SAMPLES {
        return 0;
    }
    1 + (samples - WINDOW_SAMPLES) / HOP_SAMPLES
}

fn fits(cfg: &EncoderConfig, seconds: u64, budget: u64) -> bool {
    predict_peak_bytes(cfg, frames_for_seconds(seconds)) <= budget
}

/// Largest whole number of seconds whose predicted peak fits in the budget.
pub fn find_max_duration(cfg: &EncoderConfig, budget_bytes: u64) -> Result<u64> {
    cfg.validate()?;
    if !fits(cfg, 1, budget_bytes) {
        return Err(Error::BudgetTooSmall {
            budget: budget_bytes,
            needed: predict_peak_bytes(cfg, frames_for_seconds(1)),
        });
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while fits(cfg, hi, budget_bytes) {
        lo = hi;
        hi = hi
            .checked_mul(2)
            .ok_or_else(|| Error::Internal("budget admits unbounded duration".into()))?;
        if hi > 1 << 40 {
            return Err(Error::Internal("budget admits unbounded duration".into()));
        }
    }
    // Invariant: fits(lo), !fits(hi).
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(cfg, mid, budget_bytes) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::Vocab;
    use crate::encoders::{EncoderModel, HeadSpec};
    use crate::memory::track_measured_peak;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(t: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        Tensor::from_fn(&[t, 80], |_| rng.gen_range(-1.0..1.0))
    }

    fn measured(cfg: &EncoderConfig, t: usize) -> u64 {
        let m = EncoderModel::build(cfg, 1).unwrap();
        let (out, peak) = track_measured_peak(|| {
            let x = feats(t);
            m.forward(&x).map(|y| y.numel())
        });
        out.unwrap();
        peak
    }

    #[test]
    fn model_replays_every_family_exactly() {
        for family in Family::all() {
            let cfg = EncoderConfig::toy(family);
            for t in [8, 33, 200, 801] {
                assert_eq!(measured(&cfg, t), predict_peak_bytes(&cfg, t), "{family:?} T={t}");
            }
        }
    }

    #[test]
    fn monotone_in_frames() {
        for family in Family::all() {
            let cfg = EncoderConfig::toy(family);
            let mut prev = 0;
            for t in (1..3000).step_by(7) {
                let p = predict_peak_bytes(&cfg, t);
                assert!(p >= prev, "{family:?} at {t}");
                prev = p;
            }
        }
    }

    #[test]
    fn asymptotic_ratios() {
        let full = EncoderConfig::toy(Family::ConformerFull);
        let lca = EncoderConfig::toy(Family::ConformerLCA);
        let t = 400_000;
        let rf = predict_peak_bytes(&full, 2 * t) as f64 / predict_peak_bytes(&full, t) as f64;
        let rl = predict_peak_bytes(&lca, 2 * t) as f64 / predict_peak_bytes(&lca, t) as f64;
        assert!((rf - 4.0).abs() < 0.02, "{rf}");
        assert!((rl - 2.0).abs() < 0.02, "{rl}");
    }

    fn linear_scan(cfg: &EncoderConfig, budget: u64) -> u64 {
        let mut d = 1;
        while fits(cfg, d + 1, budget) {
            d += 1;
        }
        d
    }

    #[test]
    fn search_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..30 {
            let family = Family::all()[i % 6];
            let cfg = EncoderConfig::toy(family);
            let floor = predict_peak_bytes(&cfg, frames_for_seconds(1));
            let budget = floor + rng.gen_range(0..floor * 40);
            let d = find_max_duration(&cfg, budget).unwrap();
            assert_eq!(d, linear_scan(&cfg, budget), "{family:?} {budget}");
            assert!(fits(&cfg, d, budget) && !fits(&cfg, d + 1, budget));
        }
        let cfg = EncoderConfig::toy(Family::ConvOnly);
        assert!(matches!(
            find_max_duration(&cfg, 1000),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn doubling_budget_for_full_attention() {
        let cfg = EncoderConfig::toy(Family::ConformerFull);
        let budget = 4u64 << 30;
        let a = find_max_duration(&cfg, budget).unwrap() as f64;
        let b = find_max_duration(&cfg, 2 * budget).unwrap() as f64;
        assert!((1.3..=1.5).contains(&(b / a)), "{}", b / a);
    }

    #[test]
    fn frames_formula() {
        assert_eq!(frames_for_seconds(1), 98);
        assert_eq!(frames_for_seconds(60), frame_count(960_000).unwrap());
    }

    #[test]
    fn csv_and_rtf_arithmetic() {
        let vocab = Vocab::characters();
        let model = EncoderModel::build(&EncoderConfig::toy(Family::ConvOnly), 1)
            .unwrap()
            .attach_heads(HeadSpec::both(vocab.len()), 1)
            .unwrap();
        let p = Pipeline::new(model, vocab).unwrap();
        let report = sweep_rtf(&p, DecoderKind::Ctc, &[1.0, 2.0, 3.0], 4).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        for (line, s) in lines[1..].iter().zip(&report.samples) {
            let f: Vec<&str> = line.split(',').collect();
            let (d, w, r): (f64, f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
            assert_eq!(r, w / d);
            assert_eq!(s.rtf, s.wall_s / s.duration_s);
            assert_eq!(f[5], "ctc");
            assert!(s.measured_peak_bytes >= s.predicted_peak_bytes);
        }
        assert!(sweep_rtf(&p, DecoderKind::Ctc, &[2.0, 1.0], 4).is_err());
    }

    fn forced_pipeline(w_out: impl Fn(usize, usize) -> f32) -> Pipeline {
        let vocab = Vocab::characters();
        let mut model = EncoderModel::build(&EncoderConfig::toy(Family::ConformerLCA), 2)
            .unwrap()
            .attach_heads(HeadSpec::both(vocab.len()), 2)
            .unwrap();
        let j = model.param("rnnt.joint.b").unwrap().numel();
        for name in ["rnnt.joint.w_enc", "rnnt.joint.w_pred"] {
            let shape = model.param(name).unwrap().shape().to_vec();
            model.set_param(name, Tensor::zeros(&shape)).unwrap();
        }
        model.set_param("rnnt.joint.b", Tensor::full(&[j], 1.0)).unwrap();
        let rows = vocab.len() + 1;
        model
            .set_param("rnnt.joint.w_out", Tensor::from_fn(&[rows, j], |i| w_out(i / j, rows)))
            .unwrap();
        Pipeline::new(model, vocab).unwrap()
    }

    #[test]
    fn divergence_step_accounting() {
        let blank = forced_pipeline(|row, rows| if row == rows - 1 { 1.0 } else { 0.0 });
        let report = ctc_rnnt_divergence(&blank, &[1.0, 2.0], 3).unwrap();
        for r in &report.rows {
            assert_eq!(r.emissions, 0);
            assert_eq!(r.joint_evals, r.encoder_frames);
            assert!(r.ratio > 0.0);
        }
        let emit = forced_pipeline(|row, _| if row == 0 { 1.0 } else { 0.0 });
        let report = ctc_rnnt_divergence(&emit, &[1.0, 2.0], 3).unwrap();
        for r in &report.rows {
            assert_eq!(r.encoder_frames, frames_for_seconds(r.duration_s as u64).div_ceil(8));
            assert_eq!(r.joint_evals, 11 * r.encoder_frames);
            assert_eq!(r.emissions, 10 * r.encoder_frames);
        }
        assert!(ctc_rnnt_divergence(&emit, &[2.0, 1.0], 3).is_err());
    }

    #[test]
    fn rtf_formula() {
        let s = BenchSample {
            duration_s: 60.0,
            wall_s: 6.0,
            rtf: 6.0 / 60.0,
            predicted_peak_bytes: 0,
            measured_peak_bytes: 0,
            decoder: DecoderKind::Rnnt,
            transcript: String::new(),
            joint_evals: 0,
            encoder_frames: 0,
            emissions: 0,
        };
        assert_eq!(s.rtf, 0.1);
        assert_eq!(s.csv_row(), "60,6,0.1,0,0,rnnt");
    }
}
