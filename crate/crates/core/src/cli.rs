//! Command-line surface: `posfeat <synth|train-desc|train-det|extract|match|eval>`.
//!
//! Configuration is resolved as flags > `--config` file > `--profile` preset > defaults,
//! and every command writes the resolved configuration next to its outputs.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExtractConfig, Profile, SearchStrategy, TrainConfig};
use crate::desc_train::{loss_csv, DescTrainer, TrainingPair};
use crate::det_train::{reward_csv, DetTrainer};
use crate::error::Error;
use crate::eval::{gnuplot_dat, match_errors, report_csv, EvalRow, Homography};
use crate::geometry::PoseFile;
use crate::image::GrayImage;
use crate::inference::{matches_csv, mutual_nn_match, parse_matches_csv, Extractor, KeypointSet};
use crate::synth::{make_planar_pair, make_two_view_scene, PoseRange, SceneMode, TextureConfig};
use crate::tinynet::{load_checkpoint, save_checkpoint};

const CROP_MULTIPLE: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "posfeat", version, about = "Pose-supervised local feature training and matching")]
pub struct Cli {
    /// JSON file with `profile`, `train` and `extract` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scene bundles.
    Synth(SynthArgs),
    /// Stage 1: train the descriptor network from relative poses.
    TrainDesc(TrainDescArgs),
    /// Stage 2: train the detector on a frozen descriptor network.
    TrainDet(TrainDetArgs),
    /// Detect and describe keypoints in one image.
    Extract(ExtractArgs),
    /// Mutual nearest-neighbour matching of two keypoint files.
    Match(MatchArgs),
    /// Homography-based matching accuracy.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "planar")]
    pub mode: SceneMode,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Fraction of the texture covered by a periodic pattern.
    #[arg(long)]
    pub repetitive: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_search)]
    pub search: Option<SearchStrategy>,
}

#[derive(Debug, Args)]
pub struct TrainDescArgs {
    /// Directory of scene bundles (`img1.pgm`, `img2.pgm`, `pose.json` per subdirectory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct TrainDetArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen stage-1 checkpoint.
    #[arg(long)]
    pub desc: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ExtractOverrides {
    #[arg(long)]
    pub nms_size: Option<usize>,
    #[arg(long)]
    pub max_keypoints: Option<usize>,
    #[arg(long)]
    pub score_threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extract: ExtractOverrides,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub feat1: PathBuf,
    #[arg(long)]
    pub feat2: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub feat1: PathBuf,
    #[arg(long)]
    pub feat2: PathBuf,
    /// Match CSV; matches are recomputed from the features when absent.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long)]
    pub homography: PathBuf,
    #[arg(long, default_value = "pair")]
    pub pair_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional gnuplot data file with the MMA curve.
    #[arg(long)]
    pub dat: Option<PathBuf>,
}

fn parse_search(s: &str) -> Result<SearchStrategy, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown search strategy {s:?} (line-to-window, coarse-to-fine)"))
}

/// A CLI failure: a stable code plus a one-line message.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: e.code(), message: e.to_string() }
    }
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Fully resolved configuration, echoed next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub profile: Profile,
    pub threads: Option<usize>,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl RunConfig {
    /// Defaults, then the preset, then the file, then flags.
    pub fn resolve(cli: &Cli) -> CliResult<Self> {
        let file: Option<Value> = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
                Some(serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let file_profile = match file.as_ref().and_then(|f| f.get("profile")) {
            Some(v) => Some(serde_json::from_value::<Profile>(v.clone()).map_err(|e| CliError::new("config", format!("profile: {e}")))?),
            None => None,
        };
        let profile = cli.profile.or(file_profile).unwrap_or(Profile::Hpatches);
        let base = RunConfig {
            command: command_name(&cli.command).to_string(),
            profile,
            threads: None,
            train: TrainConfig::default(),
            extract: profile.extract_config(),
        };
        let mut value = serde_json::to_value(&base).map_err(Error::from)?;
        if let Some(mut f) = file {
            if let Value::Object(m) = &mut f {
                m.remove("profile");
                m.remove("command");
            }
            merge(&mut value, &f);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::new("config", e.to_string()))?;
        cfg.profile = profile;
        if let Some(s) = cli.seed {
            cfg.train.seed = s;
        }
        if cli.threads.is_some() {
            cfg.threads = cli.threads;
        }
        let (train, extract) = match &cli.command {
            Command::TrainDesc(a) => (Some(&a.train), None),
            Command::TrainDet(a) => (Some(&a.train), None),
            Command::Extract(a) => (None, Some(&a.extract)),
            _ => (None, None),
        };
        if let Some(t) = train {
            if let Some(v) = t.iterations {
                cfg.train.iterations = v;
            }
            if let Some(v) = t.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = t.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = t.search {
                cfg.train.search = v;
            }
        }
        if let Some(e) = extract {
            if let Some(v) = e.nms_size {
                cfg.extract.nms_size = v;
            }
            if let Some(v) = e.max_keypoints {
                cfg.extract.max_keypoints = v;
            }
            if let Some(v) = e.score_threshold {
                cfg.extract.score_threshold = Some(v);
            }
        }
        if let Command::Match(m) = &cli.command {
            if m.ratio.is_some() {
                cfg.extract.ratio = m.ratio;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn write_echo(&self, path: &Path) -> CliResult {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(Error::from)? + "\n").map_err(|e| io_err(path, e))
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::TrainDesc(_) => "train-desc",
        Command::TrainDet(_) => "train-det",
        Command::Extract(_) => "extract",
        Command::Match(_) => "match",
        Command::Eval(_) => "eval",
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Loads an image and crops it from the top-left to a multiple of 16.
pub fn load_image(path: &Path) -> CliResult<GrayImage> {
    let img = GrayImage::load(path).map_err(|e| CliError::new(e.code(), format!("{}: {e}", path.display())))?;
    Ok(img.crop_to_multiple(CROP_MULTIPLE)?)
}

/// Reads every scene bundle under `dir`, in name order.
pub fn load_pairs(dir: &Path) -> CliResult<Vec<TrainingPair>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("pose.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::new("invalid-input", format!("{}: no scene bundles found", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let pose = PoseFile::read(&d.join("pose.json"))?;
            Ok(TrainingPair {
                image1: load_image(&d.join("img1.pgm"))?,
                image2: load_image(&d.join("img2.pgm"))?,
                fundamental: pose.fundamental()?,
            })
        })
        .collect()
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> CliResult {
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut tex = TextureConfig::default();
    if let Some(r) = a.repetitive {
        tex.repetitive_fraction = r;
    }
    let range = PoseRange::default();
    for k in 0..a.count {
        let seed = cfg.train.seed + k as u64;
        let scene = match a.mode {
            SceneMode::Planar => make_planar_pair(seed, a.width, a.height, &tex, &range, None)?,
            SceneMode::General => make_two_view_scene(seed, a.width, a.height, (2.0, 4.0), &range, &tex, None)?,
        };
        scene.write_bundle(&a.out.join(format!("scene_{k:04}")))?;
    }
    cfg.write_echo(&a.out.join("config.json"))
}

fn cmd_train_desc(cfg: &RunConfig, a: &TrainDescArgs) -> CliResult {
    let pairs = load_pairs(&a.data)?;
    let mut trainer = DescTrainer::new(cfg.train.clone())?;
    let records = trainer.train(&pairs, cfg.train.iterations, |r| {
        if (r.iteration + 1) % 100 == 0 {
            info!("iteration {} loss {:.4}", r.iteration + 1, r.loss);
        }
    })?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    let csv = sibling(&a.out, ".loss.csv");
    std::fs::write(&csv, loss_csv(&records)).map_err(|e| io_err(&csv, e))?;
    cfg.write_echo(&sibling(&a.out, ".config.json"))
}

fn cmd_train_det(cfg: &RunConfig, a: &TrainDetArgs) -> CliResult {
    let desc_path = match &a.desc {
        Some(p) if p.is_file() => p,
        _ => return Err(CliError::new("missing-checkpoint", "descriptor checkpoint required")),
    };
    let desc = load_checkpoint(desc_path)?.descriptor()?;
    let mut train = cfg.train.clone();
    train.descriptor_channels = desc.channels();
    let pairs = load_pairs(&a.data)?;
    let mut trainer = DetTrainer::new(desc, train)?;
    let records = trainer.train(&pairs, cfg.train.iterations, |r| {
        if (r.iteration + 1) % 100 == 0 {
            info!("iteration {} reward {:.4} loss {:.4}", r.iteration + 1, r.mean_reward, r.loss);
        }
    })?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    let csv = sibling(&a.out, ".reward.csv");
    std::fs::write(&csv, reward_csv(&records)).map_err(|e| io_err(&csv, e))?;
    cfg.write_echo(&sibling(&a.out, ".config.json"))
}

fn cmd_extract(cfg: &RunConfig, a: &ExtractArgs) -> CliResult {
    let desc = load_checkpoint(&a.desc)?.descriptor()?;
    let det = load_checkpoint(&a.det)?.detector()?;
    let ex = Extractor::new(desc, det)?;
    let image = load_image(&a.image)?;
    let kps = ex.extract(&image, &cfg.extract)?;
    kps.save(&a.out)?;
    cfg.write_echo(&sibling(&a.out, ".config.json"))
}

fn load_keypoints(path: &Path) -> CliResult<KeypointSet> {
    KeypointSet::load(path).map_err(|e| CliError::new(e.code(), format!("{}: {e}", path.display())))
}

fn cmd_match(cfg: &RunConfig, a: &MatchArgs) -> CliResult {
    let k1 = load_keypoints(&a.feat1)?;
    let k2 = load_keypoints(&a.feat2)?;
    if k1.channels != k2.channels {
        return Err(CliError::new("invalid-input", "keypoint files disagree on descriptor width"));
    }
    let m = mutual_nn_match(&k1.descriptors, &k2.descriptors, k1.channels, cfg.extract.ratio);
    std::fs::write(&a.out, matches_csv(&m)).map_err(|e| io_err(&a.out, e))?;
    cfg.write_echo(&sibling(&a.out, ".config.json"))
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> CliResult {
    let k1 = load_keypoints(&a.feat1)?;
    let k2 = load_keypoints(&a.feat2)?;
    let h = Homography::read_text(&a.homography)?;
    let matches = match &a.matches {
        Some(p) => parse_matches_csv(&std::fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => mutual_nn_match(&k1.descriptors, &k2.descriptors, k1.channels, cfg.extract.ratio),
    };
    let errors = match_errors(&matches, &k1.points, &k2.points, &h)?;
    let rows = [EvalRow::new(a.pair_id.clone(), &errors)];
    std::fs::write(&a.out, report_csv(&rows)).map_err(|e| io_err(&a.out, e))?;
    if let Some(d) = &a.dat {
        std::fs::write(d, gnuplot_dat(&rows)).map_err(|e| io_err(d, e))?;
    }
    cfg.write_echo(&sibling(&a.out, ".config.json"))
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> CliResult {
    let cfg = RunConfig::resolve(cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::new("invalid-input", "--threads must be >= 1"));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::TrainDesc(a) => cmd_train_desc(&cfg, a),
        Command::TrainDet(a) => cmd_train_det(&cfg, a),
        Command::Extract(a) => cmd_extract(&cfg, a),
        Command::Match(a) => cmd_match(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("posfeat").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_override_preset() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"profile":"aachen","train":{"lr":0.01,"iterations":7},"extract":{"max_keypoints":5}}"#).unwrap();
        let cfg = RunConfig::resolve(&parse(&["train-desc", "--data", "d", "--out", "o", "--config", f.to_str().unwrap(), "--lr", "0.5"])).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.profile, Profile::Aachen);
        assert_eq!(cfg.extract.nms_size, 7);
        assert_eq!(cfg.extract.max_keypoints, 5);
        assert_eq!(cfg.train.n_line, 100);

        let cfg = RunConfig::resolve(&parse(&["--profile", "eth", "extract", "--image", "i", "--desc", "a", "--det", "b", "--out", "o", "--config", f.to_str().unwrap()])).unwrap();
        assert_eq!(cfg.profile, Profile::Eth);
        assert_eq!(cfg.extract.max_keypoints, 5);
        assert_eq!(cfg.extract.ratio, Some(0.8));
    }

    #[test]
    fn presets_carry_published_values() {
        let cfg = RunConfig::resolve(&parse(&["match", "--feat1", "a", "--feat2", "b", "--out", "o", "--profile", "eth", "--ratio", "0.7"])).unwrap();
        assert_eq!(cfg.extract.nms_size, 7);
        assert_eq!(cfg.extract.max_keypoints, 20000);
        assert_eq!(cfg.extract.ratio, Some(0.7));
        let cfg = RunConfig::resolve(&parse(&["match", "--feat1", "a", "--feat2", "b", "--out", "o"])).unwrap();
        assert_eq!(cfg.extract.nms_size, 3);
        assert_eq!(cfg.extract.max_keypoints, 8192);
    }

    #[test]
    fn invalid_config_values_are_rejected() {
        let e = RunConfig::resolve(&parse(&["train-desc", "--data", "d", "--out", "o", "--batch-size", "0"])).unwrap_err();
        assert_eq!(e.code, "invalid-input");
    }

    #[test]
    fn error_display_is_one_line() {
        let e = CliError::new("x", "two\nlines");
        assert_eq!(e.to_string(), "error[x]: two lines");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/a/desc.pfw"), ".loss.csv"), PathBuf::from("/a/desc.loss.csv"));
    }
}
