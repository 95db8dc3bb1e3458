use std::path::Path;
use std::process::{Command, Output};

use scratch_st::cli::{Preset, RunConfig};
use scratch_st::config::parse_text;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scratch-st")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_tiny(out: &Path) -> Output {
    run(&[
        "train",
        "--out",
        p(out),
        "--seed",
        "5",
        "--set",
        "max_steps=4",
        "--set",
        "synth_samples=12",
        "--set",
        "synth_dev_samples=4",
        "--set",
        "checkpoint_every=2",
        "--set",
        "n_enc=1",
        "--set",
        "n_dec=1",
    ])
}

#[test]
fn train_is_reproducible_and_echoes_a_parseable_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train_tiny(&a);
    assert_eq!(code(&ra), 0, "{}", text(&ra.stderr));
    assert_eq!(code(&train_tiny(&b)), 0);
    for f in ["metrics.tsv", "averaged.ckpt", "vocab.txt", "step-2.ckpt", "step-4.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let saved = std::fs::read_to_string(a.join("config.txt")).unwrap();
    let stderr = text(&ra.stderr);
    let echo: String = stderr
        .lines()
        .skip_while(|l| *l != "# resolved config")
        .skip(1)
        .take_while(|l| l.contains('='))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(echo, saved);
    let mut reparsed = RunConfig::preset(Preset::Paper);
    reparsed.apply(&parse_text(&echo).unwrap()).unwrap();
    assert_eq!(reparsed.render(), saved);
    assert!(saved.contains("seed=5\n") && saved.contains("max_steps=4\n"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny\nmax_steps = 2\nlambda = 0.5\nsynth_samples = 8\nsynth_dev_samples = 2\nn_enc = 1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--set", "lambda=0.2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let saved = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(saved.contains("lambda=0.2\n") && saved.contains("max_steps=2\n"), "{saved}");
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", p(dir.path()), "--set", "lambda=1.5"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("lambda"));
    let o = run(&["train", "--out", p(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["translate", "--bogus-flag"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn translate_evaluate_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("model");
    assert_eq!(code(&train_tiny(&model_dir)), 0);
    let synth_dir = dir.path().join("synth");
    let o = run(&["synth", "--count", "4", "--seed", "9", "--out", p(&synth_dir)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let manifest = synth_dir.join("manifest.tsv");
    let ckpt = model_dir.join("averaged.ckpt");
    let vocab = model_dir.join("vocab.txt");
    let translate = |input: &Path, extra: &[&str]| {
        let mut args = vec!["translate", "--checkpoint", p(&ckpt), "--vocab", p(&vocab), "--input", p(input)];
        args.extend_from_slice(extra);
        run(&args)
    };

    let greedy = translate(&manifest, &["--greedy"]);
    assert_eq!(code(&greedy), 0, "{}", text(&greedy.stderr));
    assert_eq!(text(&greedy.stdout).lines().count(), 4);
    let beam1 = translate(&manifest, &["--beam", "1", "--workers", "3"]);
    assert_eq!(greedy.stdout, beam1.stdout);
    let scored = translate(&manifest, &["--scores", "--workers", "2"]);
    assert!(text(&scored.stdout).lines().all(|l| l.split('\t').nth(1).unwrap().parse::<f64>().is_ok()));

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let o = translate(&empty, &[]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());

    // One unreadable item: empty line in its slot, error on stderr, success overall.
    let list = dir.path().join("list.txt");
    let good = synth_dir.join("audio").join("synth-9-00000.wav");
    std::fs::write(&list, format!("{}\nmissing.wav\n", p(&good))).unwrap();
    let o = translate(&list, &["--greedy"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<String> = text(&o.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], text(&greedy.stdout).lines().next().unwrap());
    assert_eq!(lines[1], "");
    assert!(text(&o.stderr).contains("missing.wav"));
    std::fs::write(&list, "missing.wav\nalso-missing.wav\n").unwrap();
    assert_eq!(code(&translate(&list, &[])), 2);

    let refs = dir.path().join("refs.txt");
    let refs_text: String = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", l.split('\t').nth(2).unwrap()))
        .collect();
    std::fs::write(&refs, &refs_text).unwrap();
    let o = run(&["evaluate", "--hyps", p(&refs), "--refs", p(&refs)]);
    assert_eq!(code(&o), 0);
    assert!(text(&o.stdout).starts_with("BLEU = 100.00"), "{}", text(&o.stdout));
    let short = dir.path().join("short.txt");
    std::fs::write(&short, "a\n").unwrap();
    assert_eq!(code(&run(&["evaluate", "--hyps", p(&short), "--refs", p(&refs)])), 2);
}

fn write_tone(path: &Path, sample_rate: u32, seconds: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (sample_rate as f64 * seconds) as usize;
    for i in 0..n {
        let x = 0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sample_rate as f64).sin();
        w.write_sample((x * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn features_reports_shapes_and_rejects_wrong_rate() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    write_tone(&wav, 16_000, 1.0);
    let dump = dir.path().join("tone.feat");
    let o = run(&["features", "--wav", p(&wav), "--output", p(&dump)]);
    assert_eq!(code(&o), 0);
    assert_eq!(text(&o.stdout).trim(), "T=98 d=40");
    let record = scratch_st::frontend::read_feature_record(std::fs::File::open(&dump).unwrap()).unwrap().unwrap();
    assert_eq!((record.1, record.2, record.3.len()), (98, 40, 98 * 40));
    assert_eq!(text(&run(&["features", "--wav", p(&wav), "--stage", "normalized"]).stdout).trim(), "T=98 d=120");
    assert_eq!(text(&run(&["features", "--wav", p(&wav), "--stage", "stacked"]).stdout).trim(), "T=33 d=360");
    assert_eq!(text(&run(&["features", "--wav", p(&wav), "--mode", "raw"]).stdout).trim(), "T=98 d=400");

    let slow = dir.path().join("slow.wav");
    write_tone(&slow, 8_000, 1.0);
    let o = run(&["features", "--wav", p(&slow)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("8000"), "{}", text(&o.stderr));
}
