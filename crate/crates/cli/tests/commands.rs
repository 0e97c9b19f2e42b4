mod common;

use std::fs;
use std::process::Command;

use common::{config, config_text, write_config};
use singlem::signal_io::{read_container, write_container, ChannelSignal, Recording};
use singlem_cli::{
    cmd_evaluate, cmd_extract, cmd_preprocess, cmd_pretrain, cmd_synth, snapshot, CliError, PretrainOptions,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_singlem"))
}

#[test]
fn pretrain_writes_one_loss_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, 2, 1, 1, 1, 10.0);
    cmd_synth(&cfg, &dir.path().join("raw")).unwrap();
    let out = dir.path().join("run");
    let t = cmd_pretrain(&cfg, &dir.path().join("raw"), &out, &PretrainOptions::default()).unwrap();
    assert_eq!(t.step_index(), 10);
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("step,lr,total,l_masked,l_unmasked,l_bg\n"));
    assert!(out.join("manifest.json").exists());
    assert!(out.join("checkpoint/manifest.txt").exists());
}

#[test]
fn resume_matches_uninterrupted_run_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(5, 2, 1, 1, 1, 10.0);
    let raw = dir.path().join("raw");
    cmd_synth(&cfg, &raw).unwrap();
    let full = dir.path().join("full");
    cmd_pretrain(&cfg, &raw, &full, &PretrainOptions::default()).unwrap();

    let part = dir.path().join("part");
    let first = PretrainOptions {
        resume: None,
        stop_after: Some(5),
    };
    assert_eq!(cmd_pretrain(&cfg, &raw, &part, &first).unwrap().step_index(), 5);
    let resumed = dir.path().join("resumed");
    let second = PretrainOptions {
        resume: Some(part.join("checkpoint")),
        stop_after: None,
    };
    cmd_pretrain(&cfg, &raw, &resumed, &second).unwrap();
    assert_eq!(snapshot(&full).unwrap(), snapshot(&resumed).unwrap());
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(5, 2, 1, 1, 1, 10.0);
    let raw = dir.path().join("raw");
    cmd_synth(&cfg, &raw).unwrap();
    let run = dir.path().join("run");
    let stop = PretrainOptions {
        resume: None,
        stop_after: Some(2),
    };
    cmd_pretrain(&cfg, &raw, &run, &stop).unwrap();
    let weights = run.join("checkpoint/weights.bin");
    let mut bytes = fs::read(&weights).unwrap();
    bytes[40] ^= 0x01;
    fs::write(&weights, bytes).unwrap();

    let resume = PretrainOptions {
        resume: Some(run.join("checkpoint")),
        stop_after: None,
    };
    let err = cmd_pretrain(&cfg, &raw, &dir.path().join("again"), &resume).unwrap_err();
    assert_eq!(err.code(), "SGL-E007", "{err}");

    let cfg_path = write_config(dir.path(), &config_text(5, 2, 1, 1, 1, 10.0));
    let out = bin()
        .args(["pretrain", raw.to_str().unwrap(), "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("cli"))
        .arg("--resume")
        .arg(run.join("checkpoint"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[SGL-E007]"), "{stderr}");
}

#[test]
fn missing_seed_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(1, 2, 1, 1, 1, 4.0).replace("seed = 1\n", "");
    let cfg_path = write_config(dir.path(), &text);
    let out = bin()
        .arg("synth")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.starts_with("error[SGL-E002]") && stderr.contains("seed"),
        "{stderr}"
    );
}

#[test]
fn preprocess_outputs_model_rate_and_splits_on_spikes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(2, 1, 1, 1, 1, 8.0);
    let raw = dir.path().join("raw");
    cmd_synth(&cfg, &raw).unwrap();
    let out = cmd_preprocess(&cfg, &raw, &dir.path().join("pre")).unwrap();
    assert_eq!(out.len(), 1);
    let header = fs::read_to_string(&out[0]).unwrap();
    assert!(header.contains("rate=128\n"), "{header}");
    assert!(header.contains("scaled=true"));

    let mut rec = read_container(&raw.join("S000_c0_t0.sgh")).unwrap();
    let n = rec.channels[0].samples.len();
    for v in &mut rec.channels[0].samples[n / 2 - 64..n / 2 + 64] {
        *v += 300.0;
    }
    let spiky = dir.path().join("spiky");
    fs::create_dir_all(&spiky).unwrap();
    write_container(&rec, &spiky.join("s.sgh")).unwrap();
    let segs = cmd_preprocess(&cfg, &spiky, &dir.path().join("pre2")).unwrap();
    assert!(segs.len() >= 2, "{} segments", segs.len());
}

#[test]
fn empty_trials_dir_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("labels.csv"), "file,subject,label\n").unwrap();
    let mut cfg = config(1, 2, 1, 1, 1, 4.0);
    cfg.extract.fourier_k = Some(2);
    let err = cmd_extract(&cfg, dir.path(), None, &dir.path().join("o")).unwrap_err();
    assert!(matches!(err, CliError::EmptyInput(_)), "{err}");
    assert_eq!(err.code(), "SGL-E011");
}

#[test]
fn extract_writes_full_width_rows_and_fourier_switch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(4, 2, 2, 2, 2, 8.0);
    // 8 s minus 1.5 s each end is 640 samples at 128 Hz. Tiny preset tokens
    // are 16 samples with stride 12, so that makes 53 tokens.
    cfg.extract.pad_s = 1.5;
    cfg.encoder.max_seq_len = Some(64);
    let trials = dir.path().join("trials");
    cmd_synth(&cfg, &trials).unwrap();
    let run = dir.path().join("run");
    cmd_pretrain(&cfg, &trials, &run, &PretrainOptions::default()).unwrap();
    let path = cmd_extract(&cfg, &trials, Some(&run.join("checkpoint")), &dir.path().join("feat")).unwrap();
    let text = fs::read_to_string(path).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 2 + 2 * 53 * 4);
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);

    cfg.extract.fourier_k = Some(3);
    let path = cmd_extract(&cfg, &trials, None, &dir.path().join("four")).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 2 * 2 * 3 * 5);
}

#[test]
fn evaluate_is_deterministic_with_one_fold_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(8, 3, 3, 2, 4, 8.0);
    cfg.extract.fourier_k = Some(2);
    let trials = dir.path().join("trials");
    cmd_synth(&cfg, &trials).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let report = cmd_evaluate(&cfg, &trials, None, &a, true).unwrap();
    cmd_evaluate(&cfg, &trials, None, &b, true).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert_eq!(snapshot(&a).unwrap(), snapshot(&b).unwrap());
    let per = fs::read_to_string(a.join("per_channel.csv")).unwrap();
    assert_eq!(per.lines().count(), 1 + 3);
    assert!(fs::read_to_string(a.join("summary.txt"))
        .unwrap()
        .contains("fourier-k2"));

    // Features file round trip gives the same report.
    let feat = cmd_extract(&cfg, &trials, None, &dir.path().join("f")).unwrap();
    let c = dir.path().join("c");
    cmd_evaluate(&cfg, &feat, None, &c, false).unwrap();
    assert_eq!(
        fs::read(a.join("report.csv")).unwrap(),
        fs::read(c.join("report.csv")).unwrap()
    );
}

#[test]
fn scaled_containers_feed_pretraining_directly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(6, 1, 1, 1, 1, 6.0);
    let mut sig = ChannelSignal::new("Cz", (0..512).map(|t| 0.1 * (t as f32 * 0.3).sin()).collect());
    sig.scaled = true;
    let rec = Recording::new("S000", vec![sig], 128.0).unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    write_container(&rec, &corpus.join("a.sgh")).unwrap();
    let t = cmd_pretrain(&cfg, &corpus, &dir.path().join("o"), &PretrainOptions::default()).unwrap();
    assert!(t.history().iter().all(|r| r.parts.total.is_finite()));
}
