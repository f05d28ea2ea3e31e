use std::path::Path;
use std::process::{Command, Output};

use galr_core::io::{save_checkpoint, wav_read, wav_write};
use galr_core::training::{gen_synthetic, SyntheticConfig};
use galr_core::{HyperParams, SeparatorModel, Waveform};

fn galr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Asserts failure with a single `error[kind]:` line.
fn assert_error(o: &Output, kind: &str) {
    assert!(!o.status.success(), "expected failure, stdout: {}", stdout(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_report_for_the_lightest_row() {
    let o = galr(&["cost", "--arch", "galr", "--D", "64", "--M", "16", "--K", "100", "--Q", "32", "--seconds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let gflops: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("gflops="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((gflops - 5.6).abs() / 5.6 <= 0.2, "{gflops}");
    assert!(text.contains("params=1522392"));
    assert!(text.contains("mpl=O(K)"));

    let csv = stdout(&galr(&["cost", "--arch", "dprnn", "--csv"]));
    assert!(csv.starts_with("arch,D,M,K,Q,params,gflops,peak_activations\ndprnn,64,16,100,0,"));
    let table = stdout(&galr(&["cost", "--table"]));
    assert_eq!(table.lines().count(), 13);
}

#[test]
fn error_paths_are_one_greppable_line() {
    assert_error(&galr(&["cost", "--arch", "rnn"]), "usage");
    assert_error(&galr(&["cost", "--arch", "galr", "--Q", "500"]), "config");
    assert_error(&galr(&["cost", "--J", "7"]), "config");
    assert_error(&galr(&["cost", "--seconds", "0"]), "usage");
    assert_error(&galr(&["frobnicate"]), "usage");
    assert_error(&galr(&["separate", "--model", "/nonexistent.galr", "--input", "x.wav"]), "io");
    assert_error(&galr(&["ablate"]), "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nd = 10\nj = 4\n").unwrap();
    assert_error(&galr(&["train", "--config", p(&cfg)]), "config");
    std::fs::write(&cfg, "[model]\nd = 8\nj = 2\n").unwrap();
    assert_error(&galr(&["train", "--config", p(&cfg)]), "usage");

    let junk = dir.path().join("junk.galr");
    std::fs::write(&junk, b"NOPE-not-a-checkpoint").unwrap();
    let wav = dir.path().join("in.wav");
    wav_write(&wav, &Waveform::new(vec![0.1; 800], 8000)).unwrap();
    assert_error(&galr(&["separate", "--model", p(&junk), "--input", p(&wav)]), "checkpoint");
}

#[test]
fn train_separate_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.galr");
    let metrics = dir.path().join("metrics.jsonl");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[model]\nd = 8\nm = 8\nk = 8\nq = 4\nh = 8\nj = 2\nn = 1\n\
             [train]\nepochs = 2\nbatch = 2\n\
             [data]\ntrain_count = 4\nval_count = 2\nseconds = 0.125\n\
             [paths]\ncheckpoint = {:?}\nmetrics = {:?}\n",
            p(&ckpt),
            p(&metrics)
        ),
    )
    .unwrap();
    let o = galr(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = std::fs::read_to_string(&metrics).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["loss"].is_f64() && v["epoch"].is_u64());
    }

    let ex = &gen_synthetic(&SyntheticConfig { seed: 9, count: 1, ..Default::default() }).unwrap()[0];
    let mix = dir.path().join("mix.wav");
    wav_write(&mix, &ex.mixture).unwrap();
    let out_dir = dir.path().join("out");
    std::fs::create_dir(&out_dir).unwrap();
    let o = galr(&["separate", "--model", p(&ckpt), "--input", p(&mix), "--out-dir", p(&out_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["mix_src1.wav", "mix_src2.wav"]);
    for n in &names {
        assert_eq!(wav_read(out_dir.join(n)).unwrap().len(), 8000);
    }

    let refs: Vec<_> = (0..2)
        .map(|c| {
            let path = dir.path().join(format!("ref{c}.wav"));
            wav_write(&path, &ex.sources[c]).unwrap();
            path
        })
        .collect();
    let o = galr(&["eval", "--model", p(&ckpt), "--mixture", p(&mix), "--refs", p(&refs[0]), p(&refs[1])]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["si_snri_db"].as_f64().unwrap().is_finite());
    assert_error(&galr(&["eval", "--model", p(&ckpt), "--mixture", p(&mix), "--refs", p(&refs[0])]), "usage");

    let csv = dir.path().join("attn.csv");
    let o = galr(&["attn-dump", "--model", p(&ckpt), "--input", p(&mix), "--head", "1", "--out", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("index,query,key,weight\n"));
    // I = 1999 frames at M=8, K=8 → S = 501; Q = 4 maps of S×S
    assert_eq!(text.lines().count(), 1 + 4 * 501 * 501);
    assert_error(&galr(&["attn-dump", "--model", p(&ckpt), "--input", p(&mix), "--head", "2", "--out", p(&csv)]), "usage");
}

#[test]
fn separate_writes_c_files_for_any_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.galr");
    let hp = HyperParams { c: 3, ..HyperParams::toy() };
    save_checkpoint(&SeparatorModel::<f32>::new(hp, 1).unwrap(), &ckpt).unwrap();
    let wav = dir.path().join("a.wav");
    wav_write(&wav, &Waveform::new((0..8000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect(), 8000)).unwrap();
    let o = galr(&["separate", "--model", p(&ckpt), "--input", p(&wav)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(dir.path().join("a_src3.wav").exists());
}

#[test]
fn gradcheck_reports_every_check() {
    let o = galr(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().count() > 30);
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
    assert!(text.contains("full_model_n1"));
}

#[test]
fn ablate_prints_one_line_per_variant() {
    let o = galr(&["ablate", "--toy", "--epochs", "1", "--train-count", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[0].starts_with("local=recurrent global=recurrent"));
    assert!(lines[3].starts_with("local=attentive global=attentive"));
    assert!(lines.iter().all(|l| l.contains("si_snri_db=")));
}
