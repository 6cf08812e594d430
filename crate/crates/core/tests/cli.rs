use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vino(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vino"))
        .args(args)
        .env("VINO_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vino(args);
    assert!(
        out.status.success(),
        "vino {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = "encoder.depth = 1\nencoder.embed_dim = 32\nencoder.num_heads = 2\nsynth.num_frames = 40\n";

#[test]
fn synth_gen_is_deterministic_and_complete() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "synth.seed = 7\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    let frames = ta.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(frames, 100);
    assert_eq!(ta.len(), 101);
    assert!(a.join("annotations.vmsk").exists());
}

#[test]
fn synth_gen_without_sprites_has_empty_annotations() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "synth.num_sprites = 0\nsynth.num_frames = 5\n");
    let out = tmp.path().join("v");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&out)]);
    let set = vino_core::videodata::load_annotations(&out.join("annotations.vmsk")).unwrap();
    assert_eq!(set.frames.len(), 5);
    assert!(set.frames.iter().all(|f| f.is_empty()));
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}run.steps = 0\n"));
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let ck = vino_core::harness::Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.student, ck.teacher);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 0);
    let files: Vec<_> = tree(&out).into_iter().map(|(p, _)| p).collect();
    assert_eq!(files, [PathBuf::from("checkpoint.bin"), PathBuf::from("train.log")]);
}

#[test]
fn resume_matches_fresh_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &format!("{SMALL}run.steps = 6\nrun.checkpoint_every = 3\n"),
    );
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]);
    let fresh = tmp.path().join("fresh");
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&fresh)]);

    let short = write_config(
        tmp.path(),
        "short.toml",
        &format!("{SMALL}run.steps = 3\nrun.checkpoint_every = 3\n"),
    );
    let first = tmp.path().join("first");
    ok(&["pretrain", "--config", s(&short), "--data", s(&data), "--out", s(&first)]);
    // The shorter run has a different step count, hence a different hash.
    let resumed = tmp.path().join("resumed");
    let mismatch = vino(&[
        "pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed),
        "--resume", s(&first.join("checkpoint.bin")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    // The periodic checkpoint of the full run resumes cleanly.
    ok(&[
        "pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed),
        "--resume", s(&fresh.join("checkpoint_000003.bin")),
    ]);

    let steps = |dir: &Path| -> Vec<String> {
        std::fs::read_to_string(dir.join("train.log"))
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("step="))
            .map(String::from)
            .collect()
    };
    let f = steps(&fresh);
    assert_eq!(f.len(), 6);
    assert_eq!(steps(&resumed), f[3..]);
    assert_eq!(steps(&first), f[..3]);
    assert_eq!(
        std::fs::read(fresh.join("checkpoint.bin")).unwrap(),
        std::fs::read(resumed.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn logged_effective_batch_is_micro_batch_times_accumulation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &format!("{SMALL}run.steps = 1\nrun.tubes_per_step = 2\nrun.accumulation = 4\n"),
    );
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.lines().next().unwrap().contains("effective_batch=8"), "{log}");
}

#[test]
fn control_run_logs_inactive_terms() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &format!("{SMALL}run.steps = 1\ndistill.lambda_mask = 0.0\ndistill.lambda_temp = 0.0\ndistill.teacher_masking = false\n"),
    );
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    let line = log.lines().find(|l| l.starts_with("step=")).unwrap();
    assert!(line.contains("l_mask=NA l_temp=NA"), "{line}");
    assert!(line.ends_with("wall_ms=0"), "{line}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "distill.no_such_key = 1\n");
    let out = vino(&["synth-gen", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_defaults_lists_dotted_keys() {
    let out = ok(&["--dump-defaults"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("distill.tau_teacher = 0.04"), "{text}");
    assert!(text.contains("run.accumulation = 1"));
}

struct Trained {
    _tmp: TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    data: PathBuf,
}

fn trained() -> Trained {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = write_config(&root, "c.toml", &format!("{SMALL}run.steps = 2\n"));
    let data = root.join("data");
    let out = root.join("run");
    ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    Trained {
        _tmp: tmp,
        ckpt: out.join("checkpoint.bin"),
        data,
        root,
    }
}

#[test]
fn eval_corloc_reports_and_fails_cleanly() {
    let t = trained();
    let boxes = t.root.join("boxes.txt");
    ok(&["export-boxes", "--data", s(&t.data), "--out", s(&boxes)]);
    let images = t.data.join("frames");

    let oracle = t.root.join("oracle.txt");
    let out = ok(&[
        "eval-corloc", "--ckpt", s(&t.ckpt), "--images", s(&images), "--boxes", s(&boxes),
        "--out", s(&oracle), "--oracle-keys",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("corloc 100.00"));

    let (a, b) = (t.root.join("a.txt"), t.root.join("b.txt"));
    for r in [&a, &b] {
        ok(&["eval-corloc", "--ckpt", s(&t.ckpt), "--images", s(&images), "--boxes", s(&boxes), "--out", s(r)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let empty = t.root.join("empty");
    std::fs::create_dir(&empty).unwrap();
    let r = vino(&["eval-corloc", "--ckpt", s(&t.ckpt), "--images", s(&empty), "--boxes", s(&boxes), "--out", s(&a)]);
    assert!(!r.status.success());

    let no_boxes = write_config(&t.root, "none.txt", "");
    let r = vino(&["eval-corloc", "--ckpt", s(&t.ckpt), "--images", s(&images), "--boxes", s(&no_boxes), "--out", s(&a)]);
    assert!(!r.status.success());
}

#[test]
fn attn_viz_writes_same_size_overlay() {
    let t = trained();
    let frame = t.data.join("frames/000000.png");
    let (a, b) = (t.root.join("a.png"), t.root.join("b.png"));
    ok(&["attn-viz", "--ckpt", s(&t.ckpt), "--image", s(&frame), "--out", s(&a)]);
    ok(&["attn-viz", "--ckpt", s(&t.ckpt), "--image", s(&frame), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let src = vino_core::image::Image::load(&frame).unwrap();
    let over = vino_core::image::Image::load(&a).unwrap();
    assert_eq!((over.height(), over.width()), (src.height(), src.width()));

    let odd = t.root.join("odd.png");
    src.resize(30, 30).save(&odd).unwrap();
    let r = vino(&["attn-viz", "--ckpt", s(&t.ckpt), "--image", s(&odd), "--out", s(&t.root.join("c.png"))]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("divisible"), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn dump_views_writes_manifest() {
    let t = trained();
    let out = t.root.join("views");
    ok(&["dump-views", "--data", s(&t.data), "--out", s(&out), "--step", "3"]);
    assert!(out.join("tube_0/manifest.txt").exists());
}
