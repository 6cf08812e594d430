//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed. Extra arguments select criteria by substring.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vino_core::discovery::{build_patch_graph, corloc_from_ious, iou, select_seed, BBox};
use vino_core::distill::{
    build_positive_set, cross_entropy, entropy, kl_divergence, teacher_distribution, tube_pass, DistillConfig,
    OptimConfig, TrainState, Trainer,
};
use vino_core::encoder::{Encoder, EncoderConfig, Mat};
use vino_core::harness::eval::{frame_id, ground_truth_boxes, oracle_evaluate, Evaluator};
use vino_core::harness::train::{initial_state, pretrain, synthetic_corpus, trainer_for};
use vino_core::harness::ExperimentConfig;
use vino_core::image::Image;
use vino_core::maskops::{object_conditioned_mask, union_mask, BinaryMask};
use vino_core::videodata::{tube_at, MaskFilter, SyntheticSceneConfig, SyntheticVideo, VideoSource};
use vino_core::viewgen::{build_tube_views, PhotometricConfig, ViewBatch, ViewConfig};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn mask_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for _ in 0..1200 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let k = rng.random_range(1..=6usize);
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=k)).collect();
        let masks: Vec<BinaryMask> = (1..=k)
            .map(|l| BinaryMask::from_fn(h, w, |r, c| labels[r * w + c] == l))
            .collect();
        let refs: Vec<&BinaryMask> = masks.iter().collect();
        let union = union_mask(&refs, (h, w)).unwrap();
        let background = union.not();
        for (i, m) in masks.iter().enumerate() {
            let cond = object_conditioned_mask(&union, m).unwrap();
            for (j, other) in masks.iter().enumerate() {
                if j != i && !cond.and(other).unwrap().is_empty() {
                    return outcome(false, format!("{h}x{w}, K={k}: object {i} view keeps object {j}"));
                }
            }
            if !cond.contains(&background) || !cond.contains(m) {
                return outcome(false, format!("{h}x{w}, K={k}: object {i} view drops background or itself"));
            }
            if k == 1 && cond.count_ones() != h * w {
                return outcome(false, format!("{h}x{w}: single object view is not all ones"));
            }
        }
        checked += 1;
    }
    outcome(true, format!("{checked} configurations"))
}

fn softmax_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_shift = 0f64;
    let mut worst_ce = 0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..64);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let tau = rng.random_range(0.02..1.0);
        let kappa = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + kappa).collect();
        let q = teacher_distribution(&z, &c, tau);
        let q2 = teacher_distribution(&shifted, &c, tau);
        worst_shift = q.iter().zip(&q2).map(|(a, b)| (a - b).abs()).fold(worst_shift, f64::max);
        let zp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = teacher_distribution(&zp, &vec![0.0; n], rng.random_range(0.05..1.0));
        let gap = (cross_entropy(&q, &p) - entropy(&q) - kl_divergence(&q, &p)).abs();
        worst_ce = worst_ce.max(gap);
    }
    let ok = worst_shift <= 1e-10 && worst_ce <= 1e-10;
    outcome(ok, format!("max shift error {worst_shift:.2e}, max H - H - KL {worst_ce:.2e} over 1000 draws"))
}

fn toy_encoder() -> Encoder {
    Encoder::new(EncoderConfig {
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        head_hidden_dim: 8,
        head_bottleneck_dim: 4,
        head_output_dim: 8,
        input_size: 16,
        positional_embedding: true,
    })
    .unwrap()
}

fn toy_batch(seed: u64) -> ViewBatch {
    let video = SyntheticVideo::new(&SyntheticSceneConfig {
        height: 48,
        width: 48,
        num_sprites: 2,
        sprite_size_min: 10,
        sprite_size_max: 14,
        num_frames: 12,
        seed,
        ..Default::default()
    })
    .unwrap();
    let tube = tube_at(&video, 0, 3, 2, &MaskFilter::default()).unwrap();
    let cfg = ViewConfig {
        global_size: 16,
        local_size: 8,
        local_views: 2,
        global_photometric: PhotometricConfig::identity(),
        local_photometric: PhotometricConfig::identity(),
        ..Default::default()
    };
    build_tube_views(&tube, &cfg, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_trainer(distill: DistillConfig, optim: OptimConfig) -> Trainer {
    Trainer {
        encoder: toy_encoder(),
        distill,
        optim,
        total_steps: 100,
    }
}

fn toy_state(tr: &Trainer, seed: u64) -> TrainState {
    let p = tr.encoder.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    TrainState::new(p, &tr.distill, tr.encoder.config().head_output_dim)
}

fn gradient_check() -> Outcome {
    let tr = toy_trainer(DistillConfig::default(), OptimConfig::default());
    let mut st = toy_state(&tr, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // A teacher and center away from the student make every term informative.
    st.teacher = tr.encoder.init_params(&mut ChaCha8Rng::seed_from_u64(99));
    st.distill.center.iter_mut().for_each(|c| *c = rng.random_range(-0.05..0.05));
    let batch = toy_batch(5);
    let n_params = st.student.num_scalars();
    let pass = tube_pass(&tr.encoder, &st.student, &st.teacher, &st.distill, &batch).unwrap();
    if pass.loss.local.is_none() || pass.loss.mask.is_none() || pass.loss.temp.is_none() {
        return outcome(false, "not all three terms are active");
    }
    let loss_at = |student: &vino_core::encoder::ParamStore| {
        tube_pass(&tr.encoder, student, &st.teacher, &st.distill, &batch)
            .unwrap()
            .loss
            .total
    };
    let h = 1e-7;
    let mut worst = 0f64;
    let mut sampled = 0;
    let mut tries = 0;
    while sampled < 60 && tries < 5000 {
        tries += 1;
        let pi = rng.random_range(0..st.student.len());
        let (r, c) = st.student.params[pi].value.dim();
        let idx = (rng.random_range(0..r), rng.random_range(0..c));
        let analytic = pass.student_grads[pi][idx];
        let mut s = st.student.clone();
        let x = s.params[pi].value[idx];
        s.params[pi].value[idx] = x + h;
        let up = loss_at(&s);
        s.params[pi].value[idx] = x - h;
        let down = loss_at(&s);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        sampled += 1;
    }
    let ok = n_params <= 5000 && sampled >= 50 && worst <= 1e-4;
    outcome(ok, format!("{n_params} params, {sampled} coordinates, max relative error {worst:.2e}"))
}

fn stop_gradient_and_ema() -> Outcome {
    let full = toy_trainer(DistillConfig::default(), OptimConfig::default());
    let st = toy_state(&full, 0);
    let pass = tube_pass(&full.encoder, &st.student, &st.teacher, &st.distill, &toy_batch(1)).unwrap();
    let teacher_clean = pass
        .teacher_grads
        .iter()
        .all(|g| g.as_ref().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    if !teacher_clean {
        return outcome(false, "teacher parameters received gradient");
    }
    let mu = 0.996;
    let frozen = toy_trainer(
        DistillConfig {
            lambda_local: 0.0,
            lambda_mask: 0.0,
            lambda_temp: 0.0,
            momentum: mu,
            momentum_final: mu,
            ..Default::default()
        },
        OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    let mut st = toy_state(&frozen, 0);
    st.teacher = frozen.encoder.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let student = st.student.clone();
    let batch = toy_batch(2);
    let mut gap = st.teacher.distance_sq(&student).sqrt();
    let mut worst = 0f64;
    for _ in 0..10 {
        frozen.train_step(&mut st, std::slice::from_ref(&batch)).unwrap();
        if st.student != student {
            return outcome(false, "student moved with all loss weights at zero");
        }
        let next = st.teacher.distance_sq(&student).sqrt();
        worst = worst.max((next / gap - mu).abs());
        gap = next;
    }
    outcome(worst <= 1e-9, format!("teacher gradients zero, max |ratio - mu| {worst:.2e} over 10 steps"))
}

fn positive_set_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let t_len = rng.random_range(1..=5usize);
        let mut ids = BTreeMap::new();
        for t in 0..t_len {
            let k = rng.random_range(0..=6usize);
            for slot in 0..k {
                ids.insert((t, slot), rng.random_range(0..5u32));
            }
        }
        let valid: BTreeSet<usize> = (0..t_len).filter(|_| rng.random_bool(0.8)).collect();
        let mut expected = BTreeSet::new();
        for (&(t, k), id) in &ids {
            for (&(t2, _), id2) in &ids {
                if t2 != t && id2 == id && valid.contains(&t2) {
                    expected.insert((t, k, t2));
                }
            }
        }
        let got = build_positive_set(&ids, &valid);
        let got_set: BTreeSet<_> = got.pairs.iter().copied().collect();
        if got_set != expected || got_set.len() != got.pairs.len() {
            return outcome(false, format!("tube {case}: {:?} vs {:?}", got.pairs, expected));
        }
    }
    outcome(true, "200 tubes match brute force")
}

fn brute_force_seed(sim: &Mat) -> usize {
    let n = sim.nrows();
    let mut rows: Vec<(usize, f64, usize)> = (0..n)
        .map(|i| {
            let deg = (0..n).filter(|&j| j != i && sim[[i, j]] > 0.0).count();
            let sum: f64 = (0..n).filter(|&j| j != i).map(|j| sim[[i, j]]).sum();
            (deg, sum, i)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    rows[0].2
}

fn lost_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let rows = rng.random_range(1..=8usize);
        let cols = rng.random_range(1..=8usize);
        let n = rows * cols;
        let dim = rng.random_range(2..6);
        // coarse values produce ties in degree
        let keys = Mat::from_shape_fn((n, dim), |_| rng.random_range(-1..=1) as f64);
        let graph = build_patch_graph(&keys, (rows, cols)).unwrap();
        let (got, want) = (select_seed(&graph), brute_force_seed(&graph.similarity));
        if got != want {
            return outcome(false, format!("graph {case} (N={n}): seed {got}, brute force {want}"));
        }
    }
    let video = SyntheticVideo::new(&SyntheticSceneConfig {
        num_frames: 50,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let gt = ground_truth_boxes(&video).unwrap();
    let images: Vec<(String, Image)> = (0..video.len())
        .map(|i| (frame_id(i), video.frame(i).unwrap().pixels))
        .collect();
    let report = oracle_evaluate(&images, &gt, 8).unwrap();
    outcome(
        report.corloc == 100.0 && report.evaluated == 50,
        format!("200 graphs match brute force, oracle CorLoc {:.1} on {} images", report.corloc, report.evaluated),
    )
}

fn metric_spot_checks() -> Outcome {
    let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 2.0, 2.0)).unwrap();
    let c = corloc_from_ious(&[0.6, 0.5, 0.4]).unwrap();
    let ok = v == 1.0 / 7.0 && (c - 66.7).abs() <= 0.1;
    outcome(ok, format!("iou {v} (1/7 = {}), corloc {c:.3}", 1.0 / 7.0))
}

fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

fn overfit() -> Outcome {
    let tr = Trainer {
        encoder: Encoder::new(EncoderConfig {
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            head_output_dim: 16,
            input_size: 32,
            ..Default::default()
        })
        .unwrap(),
        // Targets held fixed: the teacher and center do not move.
        distill: DistillConfig {
            momentum: 1.0,
            momentum_final: 1.0,
            center_rate: 1.0,
            ..Default::default()
        },
        optim: OptimConfig {
            warmup_steps: 0,
            ..Default::default()
        },
        total_steps: 50,
    };
    let mut st = toy_state(&tr, 11);
    let video = SyntheticVideo::new(&SyntheticSceneConfig {
        height: 48,
        width: 48,
        num_sprites: 2,
        sprite_size_min: 10,
        sprite_size_max: 14,
        num_frames: 12,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let tube = tube_at(&video, 0, 3, 2, &MaskFilter::default()).unwrap();
    let cfg = ViewConfig {
        global_size: 32,
        local_size: 16,
        local_views: 2,
        ..Default::default()
    };
    let batch = build_tube_views(&tube, &cfg, true, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| tr.train_step(&mut st, std::slice::from_ref(&batch)).unwrap().total)
        .collect();
    let s = smoothed(&losses, 10);
    let (first, last) = (s[0], s[s.len() - 1]);
    outcome(last < first, format!("10-step mean loss {first:.4} -> {last:.4}"))
}

fn e2e_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.steps = 2000;
    cfg.synth.num_sprites = 2;
    cfg.corpus.max_sprites = 4;
    cfg.corpus.clips = 20;
    cfg
}

fn held_out(base: &ExperimentConfig) -> (Vec<(String, Image)>, BTreeMap<String, Vec<BBox>>) {
    let mut held = base.clone();
    held.synth.seed = 10_000;
    held.synth.num_frames = 20;
    let mut images = Vec::new();
    let mut gt = BTreeMap::new();
    for c in 0..10 {
        let v = SyntheticVideo::new(&held.clip_config(c)).unwrap();
        for (id, b) in ground_truth_boxes(&v).unwrap() {
            gt.insert(format!("c{c}_{id}"), b);
        }
        for i in 0..v.len() {
            images.push((format!("c{c}_{}", frame_id(i)), v.frame(i).unwrap().pixels));
        }
    }
    (images, gt)
}

fn train_and_score(cfg: &ExperimentConfig, images: &[(String, Image)], gt: &BTreeMap<String, Vec<BBox>>) -> f64 {
    let corpus = synthetic_corpus(cfg).unwrap();
    let tr = trainer_for(cfg).unwrap();
    let st = pretrain(cfg, &corpus, initial_state(cfg, &tr), None, |_| {}).unwrap();
    let ev = Evaluator {
        encoder: &tr.encoder,
        params: &st.teacher,
        views: &cfg.views,
        eval_size: 0,
    };
    ev.evaluate(images, gt).unwrap().corloc
}

fn end_to_end() -> Outcome {
    let base = e2e_config();
    let (images, gt) = held_out(&base);
    let (mut vino, mut control) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        vino.push(train_and_score(&cfg, &images, &gt));
        cfg.distill.lambda_mask = 0.0;
        cfg.distill.lambda_temp = 0.0;
        cfg.distill.teacher_masking = false;
        control.push(train_and_score(&cfg, &images, &gt));
        println!("    seed {seed}: vino {:.1} control {:.1}", vino[seed as usize], control[seed as usize]);
    }
    let (v, c) = (vino.iter().sum::<f64>() / 3.0, control.iter().sum::<f64>() / 3.0);
    outcome(
        v >= c + 5.0,
        format!("mean CorLoc vino {v:.1}, control {c:.1} on {} held-out frames", images.len()),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vino"))
        .args(args)
        .env("VINO_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    std::fs::write(
        &config,
        "run.steps = 6\nrun.tubes_per_step = 2\nrun.checkpoint_every = 3\nrun.seed = 3\n\
         synth.num_frames = 40\ncorpus.clips = 2\nencoder.depth = 1\n",
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = d.join("data");
    let gen = run_cli(&["synth-gen", "--config", &s(&config), "--out", &s(&data)]);
    if !gen.status.success() {
        return outcome(false, String::from_utf8_lossy(&gen.stderr).into_owned());
    }
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        let r = run_cli(&["pretrain", "--config", &s(&config), "--data", &s(&data), "--out", &s(&out)]);
        if !r.status.success() {
            return outcome(false, String::from_utf8_lossy(&r.stderr).into_owned());
        }
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        runs.push((read("train.log"), read("checkpoint.bin"), read("checkpoint_000003.bin")));
    }
    outcome(runs[0] == runs[1], "logs and checkpoints byte-identical across two runs")
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("mask_algebra", Duration::from_secs(5), mask_algebra),
        ("softmax_centering_identities", Duration::from_secs(5), softmax_identities),
        ("gradient_check", Duration::from_secs(120), gradient_check),
        ("stop_gradient_and_ema", Duration::from_secs(10), stop_gradient_and_ema),
        ("positive_set_oracle", Duration::from_secs(10), positive_set_oracle),
        ("lost_oracle", Duration::from_secs(30), lost_oracle),
        ("metric_spot_checks", Duration::from_secs(5), metric_spot_checks),
        ("end_to_end_decontextualization", Duration::from_secs(3600), end_to_end),
        ("overfit_one_tube", Duration::from_secs(60), overfit),
        ("determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let took = t0.elapsed();
        let ok = out.ok && took <= budget;
        failed += !ok as usize;
        println!(
            "{} {name}: {} ({:.1}s, budget {}s)",
            if ok { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
