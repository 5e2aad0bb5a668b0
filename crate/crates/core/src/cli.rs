//! Command-line front end. `run` returns the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint;
use crate::config::SegVitConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix};
use crate::flops;
use crate::losses::SegTarget;
use crate::model::{self, ModelConfig};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport};
use crate::shrunk::ShrunkConfig;
use crate::train::{PreparedData, TrainState, Trainer};

#[derive(Parser, Debug)]
#[command(name = "segvit", version, about = "Plain-ViT semantic segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Config file; omitted keys keep the toy defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<SegVitConfig> {
        let mut cfg = match &self.config {
            Some(path) => SegVitConfig::load(path)?,
            None => SegVitConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic train and eval splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; `train/` and `eval/` are created inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch (or resume) and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the metric log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// mIoU of a checkpoint on a split, or of saved label maps.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Split directory with ground truth (e.g. `data/eval`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted `.pgm` label maps, named like the split's.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Predict the label map of one image.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input `.ppm` image.
        #[arg(long)]
        image: PathBuf,
        /// Output `.pgm` label map.
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic MAC count of the configured model.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Crop as `HxW`; defaults to the model image size.
        #[arg(long)]
        crop: Option<String>,
        /// Print `key=value` lines instead of the table.
        #[arg(long)]
        kv: bool,
    },
    /// Finite-difference check of the full loss, plain and shrunk paths, in f64.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates sampled per parameter tensor (0 checks all).
        #[arg(long, default_value_t = 3)]
        per_param: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pass threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Failure of a check rather than of the program.
#[derive(Debug)]
pub struct CheckFailed(pub String);

fn parse_crop(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("crop {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Plain and shrunk model configs with everything else equal. A config that
/// has no shrunk section uses QD at a third of the depth.
pub fn paired_models(cfg: &SegVitConfig) -> (ModelConfig, ModelConfig) {
    let plain = ModelConfig {
        shrunk: None,
        ..cfg.model.clone()
    };
    let s = cfg.model.shrunk.clone().unwrap_or_else(|| ShrunkConfig {
        use_qu: true,
        ..ShrunkConfig::for_depth(cfg.model.encoder.depth)
    });
    let shrunk = ModelConfig {
        shrunk: Some(s),
        ..cfg.model.clone()
    };
    (plain, shrunk)
}

/// Gradient check of the total loss on one synthetic sample for the plain and
/// the shrunk variant of `cfg`'s model.
pub fn gradcheck(cfg: &SegVitConfig, per_param: Option<usize>, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let sample = data::generate(&cfg.data_config(), cfg.data.train_seed, 0)?;
    let image = sample.image.to_tensor::<f64>();
    let target = SegTarget::<f64>::new(sample.labels, cfg.model.num_classes)?;
    let (plain, shrunk) = paired_models(cfg);
    let opts = GradCheckOptions {
        per_param,
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();
    for (name, m) in [("plain", plain), ("shrunk", shrunk)] {
        let params = model::init_params::<f64>(&m, seed)?;
        let report = grad_check(&params, &opts, |p| Ok(model::loss(p, &m, &image, &target, &cfg.losses)?.total))?;
        out.push((name, report));
    }
    Ok(out)
}

pub fn gen_data(cfg: &SegVitConfig, out: &Path) -> Result<()> {
    let dc = cfg.data_config();
    for (split, seed, count) in [
        ("train", cfg.data.train_seed, cfg.data.train_images),
        ("eval", cfg.data.eval_seed, cfg.data.eval_images),
    ] {
        let samples = data::generate_range(&dc, seed, 0..count as u64)?;
        data::write_split(&out.join(split), &samples)?;
        info!("wrote {count} {split} samples to {}", out.join(split).display());
    }
    Ok(())
}

/// Train on `data_dir/train`, logging through `log`, then report eval mIoU on
/// `data_dir/eval` when present. Returns the final state.
pub fn train(
    cfg: &SegVitConfig,
    data_dir: &Path,
    resume: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<TrainState> {
    let train_set = Dataset::read_split(&data_dir.join("train"))?;
    let prepared = PreparedData::new(&train_set, cfg.model.num_classes)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load_for(path, cfg)?;
            Trainer::resume(cfg.model.clone(), cfg.train.clone(), cfg.losses.clone(), &prepared, ck.state)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.losses.clone(), &prepared)?,
    };
    trainer.run(&mut log)?;
    let eval_dir = data_dir.join("eval");
    if eval_dir.join(data::COUNT_FILE).exists() {
        let eval_set = PreparedData::new(&Dataset::read_split(&eval_dir)?, cfg.model.num_classes)?;
        let miou = trainer.evaluate(&eval_set, eval_set.len())?;
        log(&format!("iter={} eval_miou={miou:.6}", trainer.state.iteration));
    }
    Ok(trainer.state)
}

fn run_command(command: Command, stdout: &mut dyn Write) -> Result<std::result::Result<(), CheckFailed>> {
    let w = |stdout: &mut dyn Write, s: &str| stdout.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e));
    match command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            gen_data(&cfg, &out)?;
            w(stdout, &format!("train_images={} eval_images={} out={}\n", cfg.data.train_images, cfg.data.eval_images, out.display()))?;
        }
        Command::Train { cfg, data, out, resume, log } => {
            let cfg = cfg.load()?;
            let mut file = match &log {
                Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            let mut io_err = None;
            let state = train(&cfg, &data, resume.as_deref(), |line| {
                let mut emit = || -> std::io::Result<()> {
                    stdout.write_all(line.as_bytes())?;
                    stdout.write_all(b"\n")?;
                    if let Some(f) = file.as_mut() {
                        writeln!(f, "{line}")?;
                    }
                    Ok(())
                };
                if let Err(e) = emit() {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(Error::io(log.unwrap_or_else(|| "<stdout>".into()), e));
            }
            checkpoint::save(&out, &cfg, &state)?;
            w(stdout, &format!("checkpoint={}\n", out.display()))?;
        }
        Command::Eval { cfg, data: dir, checkpoint: ck, predictions } => {
            let cfg = cfg.load()?;
            let split = Dataset::read_split(&dir)?;
            let k = cfg.model.num_classes;
            let mut cm = ConfusionMatrix::new(k);
            match (ck, predictions) {
                (_, Some(pred_dir)) => {
                    for (i, gt) in split.labels.iter().enumerate() {
                        cm.add(&data::read_pgm(&data::label_path(&pred_dir, i))?, gt)?;
                    }
                }
                (Some(path), None) => {
                    let state = checkpoint::load_for(&path, &cfg)?.state;
                    for (img, gt) in split.images.iter().zip(&split.labels) {
                        cm.add(&eval::infer(&state.params, &cfg.model, &img.to_tensor())?, gt)?;
                    }
                }
                (None, None) => return Err(Error::config("eval needs --checkpoint or --predictions")),
            }
            w(stdout, &cm.report().to_string())?;
        }
        Command::Infer { cfg, checkpoint: ck, image, out } => {
            let cfg = cfg.load()?;
            let state = checkpoint::load_for(&ck, &cfg)?.state;
            let img = data::read_ppm(&image)?;
            let labels = eval::infer(&state.params, &cfg.model, &img.to_tensor())?;
            data::write_pgm(&out, &labels)?;
            w(stdout, &format!("out={}\n", out.display()))?;
        }
        Command::Flops { cfg, crop, kv } => {
            let cfg = cfg.load()?;
            let crop = match crop {
                Some(s) => parse_crop(&s)?,
                None => cfg.model.image_size(),
            };
            let est = flops::estimate(&cfg.model, crop)?;
            let mut text = if kv { est.key_values("flops") } else { est.table() };
            if cfg.model.shrunk.is_some() {
                let plain = ModelConfig {
                    shrunk: None,
                    ..cfg.model.clone()
                };
                let cmp = flops::compare(&plain, &cfg.model, crop)?;
                text += &format!("plain_total={}\nratio={:.6}\n", cmp.plain.total(), cmp.ratio);
            }
            w(stdout, &text)?;
        }
        Command::Gradcheck { cfg, per_param, seed, tolerance } => {
            let cfg = cfg.load()?;
            let per = (per_param > 0).then_some(per_param);
            let mut worst = 0.0f64;
            for (name, r) in gradcheck(&cfg, per, seed)? {
                let (param, idx) = r.worst.clone().unwrap_or_default();
                w(
                    stdout,
                    &format!("path={name} checked={} max_rel_err={:.3e} worst={param}[{idx}]\n", r.checked, r.max_rel_err),
                )?;
                worst = worst.max(r.max_rel_err);
            }
            if !(worst < tolerance) {
                return Ok(Err(CheckFailed(format!("max relative error {worst:.3e} exceeds {tolerance:.1e}"))));
            }
            w(stdout, "gradcheck=pass\n")?;
        }
    }
    Ok(Ok(()))
}

/// One line, `key=value` pairs, message quoted.
pub fn error_line(kind: &str, msg: &str) -> String {
    let flat = msg.replace('\n', " ").replace('"', "'");
    format!("error kind={kind} msg=\"{flat}\"")
}

/// Parse `args` and run. Usage errors exit 2, failures 1.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match run_command(cli.command, stdout) {
        Ok(Ok(())) => 0,
        Ok(Err(CheckFailed(msg))) => {
            let _ = writeln!(stderr, "{}", error_line("check_failed", &msg));
            1
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("segvit").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_prints_usage_and_exits_2() {
        let (code, _, err) = call(&["flops", "--bogus"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"), "{err}");
        assert_eq!(call(&["nope"]).0, 2);
        assert_eq!(call(&[]).0, 2);
    }

    #[test]
    fn errors_are_one_machine_readable_line() {
        let (code, out, err) = call(&["flops", "--set", "model.depth=x"]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("error kind=config msg=\""), "{err}");
        let (code, _, err) = call(&["flops", "--config", "/no/such.cfg"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error kind=io "), "{err}");
    }

    #[test]
    fn flops_kv_lines() {
        let (code, out, _) = call(&["flops", "--kv", "--crop", "64x32"]);
        assert_eq!(code, 0);
        let total = out.lines().find_map(|l| l.strip_prefix("flops.total=")).unwrap();
        let mut cfg = SegVitConfig::default();
        cfg.model.encoder.image_height = 64;
        let est = flops::estimate(&cfg.model, (64, 32)).unwrap();
        assert_eq!(total.parse::<u64>().unwrap(), est.total());
        assert_eq!(call(&["flops", "--crop", "64"]).0, 1);
    }

    #[test]
    fn crop_parsing() {
        assert_eq!(parse_crop("640x480").unwrap(), (640, 480));
        assert!(parse_crop("640").is_err());
        assert!(parse_crop("ax4").is_err());
    }

    #[test]
    fn error_line_stays_on_one_line() {
        let l = error_line("data", "bad\n\"thing\"");
        assert_eq!(l, "error kind=data msg=\"bad 'thing'\"");
    }
}
