use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::distill::{StepStats, TrainState, Trainer};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use super::eval::frame_id;
use crate::videodata::{
    generate_synthetic_video, sample_tube, save_annotations, AnnotationSet, DiskVideo, SyntheticSceneConfig, SyntheticVideo,
    VideoSource, ANNOTATION_FILE,
};
use crate::viewgen::{build_tube_views, dump_views, ViewBatch};

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
const DATA_SALT: u64 = 0x5eed_da7a;

/// `VINO_DETERMINISTIC=1` in the environment.
pub fn deterministic() -> bool {
    std::env::var("VINO_DETERMINISTIC").is_ok_and(|v| v == "1")
}

pub type Corpus = Vec<Box<dyn VideoSource + Send>>;

/// One video at `dir`, or every immediate subdirectory holding one.
pub fn open_corpus(dir: &Path) -> Result<Corpus> {
    if dir.join(ANNOTATION_FILE).exists() {
        return Ok(vec![Box::new(DiskVideo::open(dir)?)]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ANNOTATION_FILE).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Data(format!("no annotated videos under {}", dir.display())));
    }
    subdirs
        .iter()
        .map(|d| Ok(Box::new(DiskVideo::open(d)?) as Box<dyn VideoSource + Send>))
        .collect()
}

/// Lazily rendered clips described by `config.synth` and `config.corpus`.
pub fn synthetic_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    (0..config.corpus.clips)
        .map(|i| Ok(Box::new(SyntheticVideo::new(&config.clip_config(i))?) as Box<dyn VideoSource + Send>))
        .collect()
}

fn write_video(cfg: &SyntheticSceneConfig, dir: &Path) -> Result<()> {
    let (frames, masks) = generate_synthetic_video(cfg)?;
    let frame_dir = dir.join("frames");
    std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    for f in &frames {
        f.pixels.save(&frame_dir.join(format!("{}.png", frame_id(f.index))))?;
    }
    let set = AnnotationSet {
        height: cfg.height,
        width: cfg.width,
        frames: masks,
    };
    save_annotations(&dir.join(ANNOTATION_FILE), &set)
}

/// Renders the corpus to disk: `frames/*.png` plus annotations, directly
/// under `out` for one clip, under `out/clip_NNN` otherwise.
pub fn write_corpus(config: &ExperimentConfig, out: &Path) -> Result<()> {
    if config.corpus.clips == 1 {
        return write_video(&config.clip_config(0), out);
    }
    for i in 0..config.corpus.clips {
        write_video(&config.clip_config(i), &out.join(format!("clip_{i:03}")))?;
    }
    Ok(())
}

/// The tubes of optimiser step `step`. Each step has its own random
/// stream, so a resumed run sees exactly the batches of a fresh one.
pub fn step_batches(config: &ExperimentConfig, corpus: &Corpus, step: usize) -> Result<Vec<ViewBatch>> {
    let d = &config.data;
    let span = (d.tube_len - 1) * d.stride + 1;
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].len() >= span).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientFrames {
            needed: span,
            available: corpus.iter().map(|v| v.len()).max().unwrap_or(0),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed ^ DATA_SALT);
    rng.set_stream(step as u64);
    let filter = d.filter();
    (0..config.run.effective_batch())
        .map(|_| {
            let clip = usable[rng.random_range(0..usable.len())];
            let tube = sample_tube(corpus[clip].as_ref(), d.tube_len, d.stride, &filter, &mut rng)?;
            build_tube_views(&tube, &config.views, config.distill.teacher_masking, &mut rng)
        })
        .collect()
}

fn fmt_term(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.6}"))
}

/// One training-log line.
pub fn log_line(s: &StepStats, wall_ms: u128) -> String {
    format!(
        "step={} l_local={} l_mask={} l_temp={} total={:.6} mu={:.6} lr={:.8} wall_ms={}",
        s.step,
        fmt_term(s.local),
        fmt_term(s.mask),
        fmt_term(s.temp),
        s.total,
        s.momentum,
        s.lr,
        wall_ms
    )
}

pub fn trainer_for(config: &ExperimentConfig) -> Result<Trainer> {
    Ok(Trainer {
        encoder: Encoder::new(config.encoder.clone())?,
        distill: config.distill.clone(),
        optim: config.optim.clone(),
        total_steps: config.run.steps,
    })
}

pub fn initial_state(config: &ExperimentConfig, trainer: &Trainer) -> TrainState {
    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    let params = trainer.encoder.init_params(&mut rng);
    TrainState::new(params, &config.distill, config.encoder.head_output_dim)
}

/// Where a pretraining run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(FINAL_CHECKPOINT)
    }
}

/// Runs training from `state` to `config.run.steps`. Batches are built on
/// a worker thread and handed over through a bounded queue. `on_step`
/// sees every step's statistics.
pub fn pretrain(
    config: &ExperimentConfig,
    corpus: &Corpus,
    mut state: TrainState,
    output: Option<&RunOutput>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainState> {
    let trainer = trainer_for(config)?;
    trainer.encoder.check_params(&state.student)?;
    let det = deterministic();
    let mut log = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.log_path();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if state.step == 0 {
                writeln!(
                    f,
                    "# effective_batch={} tubes_per_step={} accumulation={} config={}",
                    config.run.effective_batch(),
                    config.run.tubes_per_step,
                    config.run.accumulation,
                    config.hash()
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let save = |state: &TrainState, path: &Path| Checkpoint::from_state(config, state).save(path);

    let start = state.step;
    let steps = config.run.steps;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Vec<ViewBatch>>>(config.run.prefetch.max(1));
        scope.spawn(move || {
            for step in start..steps {
                if tx.send(step_batches(config, corpus, step)).is_err() {
                    break;
                }
            }
        });
        for step in start..steps {
            let batches = rx
                .recv()
                .map_err(|_| Error::Data("batch producer stopped".into()))??;
            let t0 = Instant::now();
            let stats = match trainer.train_step(&mut state, &batches) {
                Ok(s) => s,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(out) = output {
                        let dir = out.dir.join(format!("diagnostics/step_{step:06}"));
                        for (i, b) in batches.iter().enumerate() {
                            dump_views(b, &config.views, &dir.join(format!("tube_{i}")))?;
                        }
                        log::error!("offending batch written to {}", dir.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let wall = if det { 0 } else { t0.elapsed().as_millis() };
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", log_line(&stats, wall)).map_err(|e| Error::io(&*path, e))?;
            }
            on_step(&stats);
            if let Some(out) = output {
                let every = config.run.checkpoint_every;
                if every > 0 && state.step % every == 0 && state.step < steps {
                    save(&state, &out.dir.join(format!("checkpoint_{:06}.bin", state.step)))?;
                }
            }
        }
        Ok(())
    })?;
    if let Some(out) = output {
        save(&state, &out.checkpoint_path())?;
    }
    Ok(state)
}
