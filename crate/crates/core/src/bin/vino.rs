use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vino_core::discovery::{format_boxes, format_report, parse_boxes};
use vino_core::encoder::Encoder;
use vino_core::error::{Error, Result};
use vino_core::harness::eval::{attention_overlay, ground_truth_boxes, load_image_dir, oracle_evaluate, Evaluator};
use vino_core::harness::train::{initial_state, open_corpus, pretrain, step_batches, trainer_for, write_corpus, RunOutput};
use vino_core::harness::{Checkpoint, ExperimentConfig};
use vino_core::image::Image;
use vino_core::videodata::DiskVideo;
use vino_core::viewgen::dump_views;

#[derive(Parser)]
#[command(name = "vino", version, about = "Mask-conditioned self-distillation on video tubes")]
struct Cli {
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic video (or several clips) with annotations.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder on annotated videos.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        ignore_config_mismatch: bool,
    },
    /// Localise one object per image and score against ground-truth boxes.
    EvalCorloc {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace encoder keys with foreground indicators from the boxes.
        #[arg(long)]
        oracle_keys: bool,
        /// Evaluate the student instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Write the class-token attention of one image as a heat overlay.
    AttnViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a video's annotations into a box file.
    ExportBoxes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the training views of one step as images.
    DumpViews {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth_gen(config: Option<&Path>, out: &Path) -> Result<()> {
    write_corpus(&load_config(config)?, out)
}

fn run_pretrain(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = open_corpus(data)?;
    let trainer = trainer_for(&cfg)?;
    let state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != cfg.hash() && !force {
                return Err(Error::Config(format!(
                    "{} was written under config {}, current config is {}",
                    path.display(),
                    ck.config_hash,
                    cfg.hash()
                )));
            }
            ck.into_state()
        }
        None => initial_state(&cfg, &trainer),
    };
    let output = RunOutput { dir: out.to_path_buf() };
    log::info!(
        "training steps {}..{} with effective batch {}",
        state.step,
        cfg.run.steps,
        cfg.run.effective_batch()
    );
    pretrain(&cfg, &corpus, state, Some(&output), |s| {
        if s.step % 100 == 0 {
            log::info!("step {} total {:.4}", s.step, s.total);
        }
    })?;
    Ok(())
}

fn eval_corloc(ckpt: Option<&Path>, images: &Path, boxes: &Path, out: &Path, oracle: bool, student: bool) -> Result<()> {
    let imgs = load_image_dir(images)?;
    let text = std::fs::read_to_string(boxes).map_err(|e| Error::io(boxes, e))?;
    let gt = parse_boxes(&text)?;
    let report = if oracle {
        let patch = match ckpt {
            Some(p) => Checkpoint::load(p)?.config()?.encoder.patch_size,
            None => ExperimentConfig::default().encoder.patch_size,
        };
        oracle_evaluate(&imgs, &gt, patch)?
    } else {
        let path = ckpt.ok_or_else(|| Error::Config("--ckpt is required unless --oracle-keys is set".into()))?;
        let ck = Checkpoint::load(path)?;
        let cfg = ck.config()?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let params = if student { &ck.student } else { &ck.teacher };
        let ev = Evaluator {
            encoder: &encoder,
            params,
            views: &cfg.views,
            eval_size: cfg.discovery.eval_size,
        };
        ev.evaluate(&imgs, &gt)?
    };
    write_file(out, &format_report(&report))?;
    println!("corloc {:.2} over {} images ({} without boxes)", report.corloc, report.evaluated, report.excluded);
    Ok(())
}

fn attn_viz(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = ck.config()?;
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let img = Image::load(image)?;
    let ev = Evaluator {
        encoder: &encoder,
        params: &ck.teacher,
        views: &cfg.views,
        eval_size: 0,
    };
    let att = ev.attention(&img)?;
    attention_overlay(&img, &att).save(out)
}

fn export_boxes(data: &Path, out: &Path) -> Result<()> {
    let video = DiskVideo::open(data)?;
    write_file(out, &format_boxes(&ground_truth_boxes(&video)?))
}

fn run_dump_views(config: Option<&Path>, data: &Path, out: &Path, step: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = open_corpus(data)?;
    for (i, b) in step_batches(&cfg, &corpus, step)?.iter().enumerate() {
        dump_views(b, &cfg.views, &out.join(format!("tube_{i}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_defaults {
        print!("{}", ExperimentConfig::default().to_dotted());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::SynthGen { config, out } => synth_gen(config.as_deref(), &out),
        Command::Pretrain {
            config,
            data,
            out,
            resume,
            ignore_config_mismatch,
        } => run_pretrain(config.as_deref(), &data, &out, resume.as_deref(), ignore_config_mismatch),
        Command::EvalCorloc {
            ckpt,
            images,
            boxes,
            out,
            oracle_keys,
            student,
        } => eval_corloc(ckpt.as_deref(), &images, &boxes, &out, oracle_keys, student),
        Command::AttnViz { ckpt, image, out } => attn_viz(&ckpt, &image, &out),
        Command::ExportBoxes { data, out } => export_boxes(&data, &out),
        Command::DumpViews {
            config,
            data,
            out,
            step,
        } => run_dump_views(config.as_deref(), &data, &out, step),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
