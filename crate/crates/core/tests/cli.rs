use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfab::cli::load_model;
use lfab::config::RunConfig;
use lfab::frontend::{synth_audio, write_wav, AudioBuffer};
use lfab::tensor::Tensor;
use lfab::weights;

fn lfab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfab")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn wav(dir: &Path, name: &str, secs: f64, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_wav(&path, &synth_audio(secs, seed).unwrap()).unwrap();
    path
}

#[test]
fn wrong_sample_rate_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("8k.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for i in 0..8000 {
        w.write_sample((i % 100) as i16).unwrap();
    }
    w.finalize().unwrap();
    let out = lfab(&["transcribe", "--config", "toy-quartznet2", "--audio", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported rate 8000"));
}

#[test]
fn unknown_config_and_tiny_budget_exit_with_config_error() {
    let out = lfab(&["max-length", "--config", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(3));
    let out = lfab(&["max-length", "--config", "toy-conformer", "--budget-bytes", "1000"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_weights_exit_with_weights_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.lfwb");
    stdout(&lfab(&["gen-weights", "--config", "toy-quartznet2", "--out", s(&w)]));
    let mut bytes = std::fs::read(&w).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    std::fs::write(&w, bytes).unwrap();
    let audio = wav(dir.path(), "a.wav", 1.0, 0);
    let out = lfab(&[
        "transcribe",
        "--config",
        "toy-quartznet2",
        "--weights",
        s(&w),
        "--audio",
        s(&audio),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let other = dir.path().join("other.lfwb");
    stdout(&lfab(&[
        "gen-weights",
        "--config",
        "toy-contextnet",
        "--out",
        s(&other),
    ]));
    let out = lfab(&[
        "transcribe",
        "--config",
        "toy-quartznet2",
        "--weights",
        s(&other),
        "--audio",
        s(&audio),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn score_reports_percent() {
    let dir = tempfile::tempdir().unwrap();
    let (r, h) = (dir.path().join("ref.txt"), dir.path().join("hyp.txt"));
    std::fs::write(&r, "A b c\n").unwrap();
    std::fs::write(&h, "a, b\n").unwrap();
    let out = stdout(&lfab(&["score", "--ref-file", s(&r), "--hyp-file", s(&h)]));
    assert_eq!(out.trim(), "33.33");

    std::fs::write(&h, "a b\nextra\n").unwrap();
    assert_eq!(
        lfab(&["score", "--ref-file", s(&r), "--hyp-file", s(&h)]).status.code(),
        Some(2)
    );
}

#[test]
fn manifest_transcription_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    wav(dir.path(), "one.wav", 1.2, 1);
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    wav(&dir.path().join("sub"), "two.wav", 0.8, 2);
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        "{\"audio_filepath\": \"sub/two.wav\", \"duration\": 0.8, \"text\": \"b\"}\n\n\
         {\"audio_filepath\": \"one.wav\", \"duration\": 1.2, \"text\": \"a\"}\n",
    )
    .unwrap();
    let out = stdout(&lfab(&[
        "transcribe",
        "--config",
        "toy-fastconformer",
        "--manifest",
        s(&manifest),
        "--decoder",
        "ctc",
    ]));
    let paths: Vec<String> = out
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v["encoder_s"].as_f64().unwrap() >= 0.0);
            v["audio_filepath"].as_str().unwrap().to_string()
        })
        .collect();
    assert_eq!(paths, ["sub/two.wav", "one.wav"]);

    let stats = stdout(&lfab(&["manifest-stats", "--manifest", s(&manifest)]));
    assert_eq!(stats.trim(), "2 0.01 0.02 0.02");
}

#[test]
fn bench_replaces_existing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    std::fs::write(&csv, "stale contents that are longer than nothing\n".repeat(100)).unwrap();
    let out = stdout(&lfab(&[
        "bench",
        "--config",
        "toy-citrinet",
        "--durations",
        "0.5,1",
        "--decoder",
        "ctc",
        "--out",
        s(&csv),
    ]));
    assert!(out.starts_with("2 rows -> "));
    let body = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(
        lines[0],
        "duration_s,wall_s,rtf,predicted_peak_bytes,measured_peak_bytes,decoder"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.5,") && lines[1].ends_with(",ctc"));
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "temporary file left behind");

    let out = lfab(&[
        "bench",
        "--config",
        "toy-citrinet",
        "--durations",
        "2,1",
        "--out",
        s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn blank_forcing_weights_give_empty_transcripts_on_silence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::preset("toy-conformer").unwrap();
    let mut model = load_model(&cfg, 0, None).unwrap();
    let blank = 28;
    let zero_like = |m: &lfab::encoders::EncoderModel, name: &str| Tensor::zeros(m.param(name).unwrap().shape());
    for name in ["ctc.w", "rnnt.joint.w_enc", "rnnt.joint.w_pred"] {
        let z = zero_like(&model, name);
        model.set_param(name, z).unwrap();
    }
    model
        .set_param(
            "ctc.b",
            Tensor::from_fn(&[blank + 1], |i| if i == blank { 1.0 } else { 0.0 }),
        )
        .unwrap();
    let j = model.param("rnnt.joint.b").unwrap().numel();
    model.set_param("rnnt.joint.b", Tensor::full(&[j], 1.0)).unwrap();
    model
        .set_param(
            "rnnt.joint.w_out",
            Tensor::from_fn(&[blank + 1, j], |i| if i / j == blank { 1.0 } else { 0.0 }),
        )
        .unwrap();
    let w = dir.path().join("blank.lfwb");
    weights::save(&model, &w).unwrap();

    let silence = dir.path().join("silence.wav");
    write_wav(&silence, &AudioBuffer::new(vec![0.0; 32000], 16000).unwrap()).unwrap();
    for decoder in ["ctc", "rnnt"] {
        let out = stdout(&lfab(&[
            "transcribe",
            "--config",
            "toy-conformer",
            "--weights",
            s(&w),
            "--audio",
            s(&silence),
            "--decoder",
            decoder,
        ]));
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some(""), "{decoder}");
        assert!(lines.next().unwrap().starts_with("timing frontend_s="));
    }
}

#[test]
fn max_length_prints_seconds_and_minutes() {
    let out = stdout(&lfab(&["max-length", "--config", "table2-conformer"]));
    let fields: Vec<&str> = out.split_whitespace().collect();
    let secs: u64 = fields[0].parse().unwrap();
    assert_eq!(fields[1], format!("{:.2}", secs as f64 / 60.0));
}

#[test]
fn gen_weights_reports_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("nested.lfwb");
    let out = stdout(&lfab(&[
        "gen-weights",
        "--config",
        "toy-citrinet",
        "--seed",
        "3",
        "--out",
        s(&w),
    ]));
    let cfg = RunConfig::preset("toy-citrinet").unwrap();
    let model = load_model(&cfg, 3, None).unwrap();
    assert_eq!(
        out.split_whitespace().next().unwrap(),
        model.parameter_count().to_string()
    );
    let mut reloaded = load_model(&cfg, 99, None).unwrap();
    weights::load_into(&mut reloaded, &w).unwrap();
    assert_eq!(weights::encode(reloaded.params()), weights::encode(model.params()));
}
