//! Command-line front end: data preparation, the three training stages,
//! prediction, evaluation and benchmarking. All randomness flows from
//! explicit seeds; identical configuration gives byte-identical artifacts.

use crate::dataset::{
    extract_gap_labels, ingest, read_labels, read_replay, read_tracks, split, synth_scenes,
    write_labels, write_replay, write_tracks, IngestConfig, KinematicGapRule, LabelExtractConfig,
    SynthConfig,
};
use crate::driver::{AccelModel, IdmParams, MlpPolicy, DRIVER_LAYERS};
use crate::env::{EnvConfig, ReplayScene};
use crate::error::{Error, Result};
use crate::eval::{evaluate_replay, predict, runtime_bench, ErrorAggregation, EvalConfig};
use crate::gap::{
    accuracy, baseline_on_observation, train_gap, CriticalGapParams, GapModel, GapTrainConfig,
};
use crate::map::{bendplatz, load_map, IntersectionMap};
use crate::mlp::{load_weights_expecting, save_weights, Activation};
use crate::scenario::load_scenario;
use crate::train::{
    config_hash, finetune_gail, load_checkpoint, pretrain_policy_resumable, save_checkpoint,
    CheckpointManifest, GailConfig, PpoConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "gapcast", version, about = "Two-stage gap-acceptance and motion prediction for unsignalized intersections")]
struct Cli {
    /// Consolidated configuration file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run log to append one machine-readable summary line to.
    #[arg(long, global = true, default_value = "gapcast_runs.jsonl")]
    log: Option<PathBuf>,
    /// Worker threads for rollout collection (bench always uses one).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct MapArg {
    /// Map file path, or "bendplatz" for the bundled intersection.
    #[arg(long, default_value = "bendplatz")]
    map: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic track table with the kinematic acceptance rule.
    Synth {
        #[command(flatten)]
        map: MapArg,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Scene duration in seconds.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generator's per-frame decisions.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
    /// Ingest, filter, extrapolate, split and extract gap labels.
    Prepare {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        tracks: PathBuf,
        /// Frame rate of the raw table (Hz).
        #[arg(long, default_value_t = 5.0)]
        frame_rate: f64,
        #[arg(long, default_value_t = 0.9)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Supervised training of the gap-acceptance network.
    TrainGap {
        #[arg(long)]
        labels: PathBuf,
        /// Held-out labels; defaults to a seeded 90/10 split of --labels.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable the per-sample training input noise.
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// On-policy pre-training in the closed-loop environment.
    Pretrain {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        gap: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epoch_length: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        reward_scale: Option<f64>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Save a resumable checkpoint every N epochs.
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Adversarial imitation fine-tuning against a replay dataset.
    Gail {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        gap: PathBuf,
        /// Checkpoint directory of the pre-trained policy.
        #[arg(long)]
        policy_dir: PathBuf,
        #[arg(long)]
        replay: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epoch_length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Roll out one scenario file over the horizon.
    Predict {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        gap: PathBuf,
        /// "idm" or a driver-policy weight file.
        #[arg(long, default_value = "idm")]
        accel: String,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric suite: trajectory metrics over a replay file, or gap accuracy
    /// over a label file.
    Eval {
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        gap: PathBuf,
        /// Replay file for trajectory metrics.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Label file for gap accuracy against the critical-gap baseline.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "idm")]
        accel: String,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        /// Stride between prediction starts (s).
        #[arg(long, default_value_t = 1.0)]
        stride: f64,
        /// Pool all error samples instead of aggregating per vehicle first.
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Runtime benchmark of the prediction engine (single-threaded).
    Bench {
        #[command(flatten)]
        map: MapArg,
        #[arg(long, default_value_t = 2)]
        min_vehicles: usize,
        #[arg(long, default_value_t = 15)]
        vehicles: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gap-network weights; a seeded random net when omitted.
        #[arg(long)]
        gap: Option<PathBuf>,
        /// "idm", "mlp" (seeded random policy) or a weight file.
        #[arg(long, default_value = "mlp")]
        accel: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Optional config file: each section replaces the built-in defaults of the
/// matching stage; explicit command-line flags still win.
#[derive(Debug, Clone, Default, Deserialize)]
struct FileConfig {
    map: Option<String>,
    env: Option<EnvConfig>,
    ppo: Option<PpoConfig>,
    gail: Option<GailConfig>,
    gap_train: Option<GapTrainConfig>,
    idm: Option<IdmParams>,
    synth: Option<SynthFileConfig>,
    critical_gap: Option<CriticalGapParams>,
}

#[derive(Debug, Clone, Deserialize)]
struct SynthFileConfig {
    arrival_rate: Option<f64>,
    commit_distance: Option<f64>,
    margin_noise: Option<f64>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("parse {}: {e}", p.display())))
        }
    }
}

fn resolve_map(name: &str, cfg: &FileConfig) -> Result<IntersectionMap> {
    let name = if name == "bendplatz" {
        cfg.map.as_deref().unwrap_or(name)
    } else {
        name
    };
    if name == "bendplatz" {
        bendplatz()
    } else {
        load_map(Path::new(name))
    }
}

fn load_gap_model(path: &Path) -> Result<GapModel> {
    let net = load_weights_expecting(
        path,
        &crate::gap::GAP_LAYERS,
        Activation::LeakyRelu,
        Activation::Sigmoid,
    )?;
    GapModel::from_net(net)
}

fn seeded_gap_model(seed: u64) -> Result<GapModel> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6761705f6d6f6465);
    GapModel::new(&mut rng)
}

fn load_accel_model(spec: &str, idm: &IdmParams, seed: u64) -> Result<AccelModel> {
    match spec {
        "idm" => Ok(AccelModel::Idm(*idm)),
        "mlp" => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6163635f6d6f6465);
            Ok(AccelModel::Mlp(MlpPolicy::new(&mut rng)?))
        }
        path => {
            let net =
                load_weights_expecting(Path::new(path), &DRIVER_LAYERS, Activation::Tanh, Activation::Tanh)?;
            Ok(AccelModel::Mlp(MlpPolicy::from_net(net)?))
        }
    }
}

fn append_run_log(log: &Option<PathBuf>, line: serde_json::Value) {
    if let Some(path) = log {
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{line}");
        }
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn cli_main() -> i32 {
    run_from(std::env::args())
}

/// Run one invocation from an explicit argument list (first element is the
/// program name). Usage errors exit 2, domain errors 1.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; everything else is a
            // usage error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = load_file_config(&cli.config)?;
    let log = cli.log.clone();
    match cli.command {
        Command::Synth { map, scenes, duration, seed, out, decisions } => {
            let map = resolve_map(&map.map, &file_cfg)?;
            let mut cfg = SynthConfig { n_scenes: scenes, duration, seed, ..Default::default() };
            if let Some(s) = &file_cfg.synth {
                if let Some(v) = s.arrival_rate {
                    cfg.arrival_rate = v;
                }
                if let Some(v) = s.commit_distance {
                    cfg.commit_distance = v;
                }
                if let Some(v) = s.margin_noise {
                    cfg.margin_noise = v;
                }
            }
            let (table, decision_log) = synth_scenes(&map, &KinematicGapRule::default(), &cfg)?;
            write_tracks(&table, &out)?;
            if let Some(dpath) = &decisions {
                let mut w = csv::Writer::from_path(dpath)
                    .map_err(|e| Error::Dataset(e.to_string()))?;
                w.write_record(["recording_id", "track_id", "frame", "delta"])
                    .map_err(|e| Error::Dataset(e.to_string()))?;
                for d in &decision_log {
                    w.write_record([
                        d.recording_id.to_string(),
                        d.track_id.to_string(),
                        d.frame.to_string(),
                        d.delta.to_string(),
                    ])
                    .map_err(|e| Error::Dataset(e.to_string()))?;
                }
                w.flush()?;
            }
            println!("synth: {} rows over {scenes} scenes -> {}", table.rows.len(), out.display());
            append_run_log(
                &log,
                serde_json::json!({"cmd": "synth", "scenes": scenes, "seed": seed, "rows": table.rows.len(), "out": out}),
            );
        }
        Command::Prepare { map, tracks, frame_rate, split: ratio, seed, out_dir } => {
            let map = resolve_map(&map.map, &file_cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let table = read_tracks(&tracks, frame_rate)?;
            let ingest_cfg = IngestConfig::default();
            let (projected, report) = ingest(&table, &map, &ingest_cfg)?;
            std::fs::write(out_dir.join("report.txt"), report.summary())?;
            let (train, val) = split(&projected, ratio, seed);
            let label_cfg = LabelExtractConfig::default();
            let labels_train = extract_gap_labels(&map, &train, &label_cfg)?;
            let labels_val = extract_gap_labels(&map, &val, &label_cfg)?;
            write_labels(&labels_train, &out_dir.join("labels_train.csv"))?;
            write_labels(&labels_val, &out_dir.join("labels_val.csv"))?;
            let to_scenes = |tracks: &[crate::dataset::ProjectedTrack]| -> Vec<ReplayScene> {
                crate::dataset::group_scenes(tracks)
                    .into_iter()
                    .map(|idxs| ReplayScene {
                        dt: 0.2,
                        tracks: idxs.iter().map(|&k| tracks[k].to_replay_track()).collect(),
                    })
                    .collect()
            };
            let scenes_train = to_scenes(&train);
            let scenes_val = to_scenes(&val);
            write_replay(&scenes_train, &map, &out_dir.join("replay_train.bin"))?;
            write_replay(&scenes_val, &map, &out_dir.join("replay_val.bin"))?;
            println!(
                "prepare: {} tracks kept ({} excluded), {} train / {} val scenes, {} / {} labels",
                report.kept,
                report.excluded.len(),
                scenes_train.len(),
                scenes_val.len(),
                labels_train.len(),
                labels_val.len()
            );
            append_run_log(
                &log,
                serde_json::json!({"cmd": "prepare", "seed": seed, "kept": report.kept,
                    "excluded": report.excluded.len(), "labels_train": labels_train.len(),
                    "labels_val": labels_val.len(), "out_dir": out_dir}),
            );
        }
        Command::TrainGap { labels, val, epochs, batch, seed, no_noise, out } => {
            let all = read_labels(&labels)?;
            let (train_set, val_set) = match &val {
                Some(vp) => (all, read_labels(vp)?),
                None => {
                    // Seeded 90/10 split by index.
                    use rand::{Rng, SeedableRng};
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let mut idx: Vec<usize> = (0..all.len()).collect();
                    for k in (1..idx.len()).rev() {
                        let m = rng.random_range(0..=k);
                        idx.swap(k, m);
                    }
                    let n_train = (idx.len() as f64 * 0.9).round() as usize;
                    let train: Vec<_> = idx[..n_train].iter().map(|&k| all[k]).collect();
                    let val: Vec<_> = idx[n_train..].iter().map(|&k| all[k]).collect();
                    (train, val)
                }
            };
            let mut cfg = file_cfg.gap_train.clone().unwrap_or_default();
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch {
                cfg.batch_size = b;
            }
            if no_noise {
                cfg.noise = None;
            }
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut model = GapModel::new(&mut rng)?;
            let report = train_gap(&mut model, &train_set, &val_set, &cfg)?;
            for (epoch, acc) in &report.history {
                println!("epoch {epoch:>5}  val_accuracy {acc:.4}");
            }
            println!(
                "train-gap: final train {:.4}, val {:.4} -> {}",
                report.final_train_accuracy,
                report.final_val_accuracy,
                out.display()
            );
            save_weights(&model.net, &out)?;
            append_run_log(
                &log,
                serde_json::json!({"cmd": "train-gap", "seed": seed, "epochs": cfg.epochs,
                    "train_accuracy": report.final_train_accuracy,
                    "val_accuracy": report.final_val_accuracy, "out": out}),
            );
        }
        Command::Pretrain { map, gap, epochs, epoch_length, lr, reward_scale, agents, seed, checkpoint_every, out_dir } => {
            let map = Arc::new(resolve_map(&map.map, &file_cfg)?);
            let gap_model = load_gap_model(&gap)?;
            let mut env_cfg = file_cfg.env.unwrap_or_default();
            if let Some(n) = agents {
                env_cfg.n_agents = n;
            }
            let mut cfg = file_cfg.ppo.clone().unwrap_or_default();
            cfg.seed = seed;
            cfg.workers = cli.threads.max(1);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = epoch_length {
                cfg.epoch_length = l;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if let Some(r) = reward_scale {
                cfg.reward_scale = r;
            }
            std::fs::create_dir_all(&out_dir)?;
            let mut curve = csv::Writer::from_path(out_dir.join("curve.csv"))
                .map_err(|e| Error::Training(e.to_string()))?;
            curve
                .write_record(["epoch", "mean_reward", "collision_rate", "mean_velocity"])
                .map_err(|e| Error::Training(e.to_string()))?;
            let log_every = (cfg.epochs / 50).max(1);
            let (policy, _value, history) = pretrain_policy_resumable(
                Arc::clone(&map),
                &gap_model,
                &env_cfg,
                &cfg,
                &out_dir,
                checkpoint_every,
                |s| {
                    if s.epoch % log_every == 0 {
                        println!(
                            "epoch {:>6}  reward {:>8.3}  collisions/agent-s {:.2e}  v {:.2}",
                            s.epoch, s.mean_reward, s.collision_rate, s.mean_velocity
                        );
                    }
                },
            )?;
            let _ = policy;
            for s in &history {
                curve
                    .write_record([
                        s.epoch.to_string(),
                        s.mean_reward.to_string(),
                        s.collision_rate.to_string(),
                        s.mean_velocity.to_string(),
                    ])
                    .map_err(|e| Error::Training(e.to_string()))?;
            }
            curve.flush()?;
            let last = history.last();
            println!(
                "pretrain: {} epochs, final reward {:.3} -> {}",
                cfg.epochs,
                last.map(|s| s.mean_reward).unwrap_or(f64::NAN),
                out_dir.display()
            );
            append_run_log(
                &log,
                serde_json::json!({"cmd": "pretrain", "seed": seed, "epochs": cfg.epochs,
                    "mean_reward": last.map(|s| s.mean_reward),
                    "collision_rate": last.map(|s| s.collision_rate), "out_dir": out_dir}),
            );
        }
        Command::Gail { map, gap, policy_dir, replay, epochs, epoch_length, seed, out_dir } => {
            let map = Arc::new(resolve_map(&map.map, &file_cfg)?);
            let gap_model = load_gap_model(&gap)?;
            let checkpoint = load_checkpoint(&policy_dir)?;
            let scenes = read_replay(&replay, &map)?;
            let env_cfg = file_cfg.env.unwrap_or_default();
            let mut cfg = file_cfg.gail.clone().unwrap_or_default();
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = epoch_length {
                cfg.epoch_length = l;
            }
            std::fs::create_dir_all(&out_dir)?;
            let log_every = (cfg.epochs / 50).max(1);
            let (policy, value, disc, history) = finetune_gail(
                Arc::clone(&map),
                &gap_model,
                &scenes,
                checkpoint.policy,
                checkpoint.value,
                &cfg,
                &env_cfg,
                |s| {
                    if s.epoch % log_every == 0 {
                        println!(
                            "epoch {:>6}  surrogate {:>7.3}  disc acc {:.3}  episodes {}",
                            s.epoch, s.mean_reward, s.disc_accuracy, s.episodes
                        );
                    }
                },
            )?;
            let mut curve = csv::Writer::from_path(out_dir.join("curve.csv"))
                .map_err(|e| Error::Training(e.to_string()))?;
            curve
                .write_record(["epoch", "mean_reward", "disc_accuracy", "episodes"])
                .map_err(|e| Error::Training(e.to_string()))?;
            for s in &history {
                curve
                    .write_record([
                        s.epoch.to_string(),
                        s.mean_reward.to_string(),
                        s.disc_accuracy.to_string(),
                        s.episodes.to_string(),
                    ])
                    .map_err(|e| Error::Training(e.to_string()))?;
            }
            curve.flush()?;
            let manifest = CheckpointManifest {
                stage: "gail".into(),
                epoch: history.len(),
                seed,
                config_hash: config_hash(&cfg),
                log_std: policy.log_std,
            };
            save_checkpoint(&out_dir, &manifest, &policy, &value, Some(&disc), None, None)?;
            println!("gail: {} epochs -> {}", history.len(), out_dir.display());
            append_run_log(
                &log,
                serde_json::json!({"cmd": "gail", "seed": seed, "epochs": history.len(), "out_dir": out_dir}),
            );
        }
        Command::Predict { map, scenario, gap, accel, horizon, out } => {
            let map = resolve_map(&map.map, &file_cfg)?;
            let gap_model = load_gap_model(&gap)?;
            let idm = file_cfg.idm.unwrap_or_default();
            let accel_model = load_accel_model(&accel, &idm, 0)?;
            let sc = load_scenario(&scenario, &map)?;
            let result = predict(&map, &sc, &gap_model, &accel_model, horizon)?;
            let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Eval(e.to_string()))?;
            w.write_record(["id", "t", "s", "v", "accel", "delta"])
                .map_err(|e| Error::Eval(e.to_string()))?;
            for series in &result.series {
                for p in &series.samples {
                    w.write_record([
                        series.id.0.to_string(),
                        p.t.to_string(),
                        p.s.to_string(),
                        p.v.to_string(),
                        p.accel.to_string(),
                        p.delta.to_string(),
                    ])
                    .map_err(|e| Error::Eval(e.to_string()))?;
                }
            }
            w.flush()?;
            println!(
                "predict: {} vehicles over {horizon} s -> {}",
                result.series.len(),
                out.display()
            );
            append_run_log(
                &log,
                serde_json::json!({"cmd": "predict", "vehicles": result.series.len(), "horizon": horizon, "out": out}),
            );
        }
        Command::Eval { map, gap, replay, labels, accel, horizon, stride, pooled, out_dir } => {
            let map_v = resolve_map(&map.map, &file_cfg)?;
            let gap_model = load_gap_model(&gap)?;
            match (replay, labels) {
                (Some(replay), _) => {
                    let scenes = read_replay(&replay, &map_v)?;
                    let idm = file_cfg.idm.unwrap_or_default();
                    let accel_model = load_accel_model(&accel, &idm, 0)?;
                    let cfg = EvalConfig {
                        horizon,
                        start_stride: stride,
                        aggregation: if pooled {
                            ErrorAggregation::Pooled
                        } else {
                            ErrorAggregation::PerVehicle
                        },
                    };
                    let out = evaluate_replay(&map_v, &scenes, &gap_model, &accel_model, &cfg)?;
                    let last = out.distance.offsets.len().saturating_sub(1);
                    println!("eval: {} predictions", out.n_predictions);
                    if !out.distance.offsets.is_empty() {
                        println!(
                            "distance at {:.1} s: RMSE {:.2} m, MAD {:.2} m (n={})",
                            out.distance.offsets[last],
                            out.distance.rmse[last],
                            out.distance.mad[last],
                            out.distance.n[last]
                        );
                    }
                    if !out.time_loss.offsets.is_empty() {
                        let k = out.time_loss.offsets.len() - 1;
                        println!(
                            "time loss at {:.1} s: RMSE {:.2} s, 80% quantile {:.2} s",
                            out.time_loss.offsets[k], out.time_loss.rmse[k], out.time_loss.q80[k]
                        );
                    }
                    println!(
                        "crossing order: {:.3} ({} pairs, {} skipped)",
                        out.crossing_order.accuracy(),
                        out.crossing_order.pairs,
                        out.crossing_order.skipped
                    );
                    if let Some(dir) = &out_dir {
                        std::fs::create_dir_all(dir)?;
                        std::fs::write(dir.join("distance.csv"), out.distance.to_table())?;
                        std::fs::write(dir.join("time_loss.csv"), out.time_loss.to_table())?;
                        std::fs::write(
                            dir.join("crossing_order.txt"),
                            format!(
                                "accuracy {}\npairs {}\nmatches {}\nskipped {}\n",
                                out.crossing_order.accuracy(),
                                out.crossing_order.pairs,
                                out.crossing_order.matches,
                                out.crossing_order.skipped
                            ),
                        )?;
                    }
                    append_run_log(
                        &log,
                        serde_json::json!({"cmd": "eval", "mode": "replay",
                            "predictions": out.n_predictions,
                            "crossing_order": out.crossing_order.accuracy()}),
                    );
                }
                (None, Some(labels)) => {
                    let set = read_labels(&labels)?;
                    let model_acc = accuracy(&gap_model, &set)?;
                    let params = file_cfg.critical_gap.unwrap_or_default();
                    // Label files carry no map context; the baseline assumes
                    // the main-road crossing situation of the sampler.
                    let v_max = 13.89;
                    let mut hits = 0usize;
                    for l in &set {
                        let b = baseline_on_observation(
                            l.observation.d_stop_j,
                            v_max,
                            params.t_crit_crossing,
                        );
                        if b == l.delta_gt {
                            hits += 1;
                        }
                    }
                    let baseline_acc = hits as f64 / set.len() as f64;
                    println!("gap accuracy: model {model_acc:.4}, critical-gap baseline {baseline_acc:.4} ({} labels)", set.len());
                    append_run_log(
                        &log,
                        serde_json::json!({"cmd": "eval", "mode": "gap",
                            "model_accuracy": model_acc, "baseline_accuracy": baseline_acc}),
                    );
                }
                (None, None) => {
                    return Err(Error::Config("eval needs --replay or --labels".into()));
                }
            }
        }
        Command::Bench { map, min_vehicles, vehicles, trials, horizon, seed, gap, accel, out } => {
            let map = resolve_map(&map.map, &file_cfg)?;
            let gap_model = match &gap {
                Some(p) => load_gap_model(p)?,
                None => seeded_gap_model(seed)?,
            };
            let idm = file_cfg.idm.unwrap_or_default();
            let accel_model = load_accel_model(&accel, &idm, seed)?;
            let counts: Vec<usize> = (min_vehicles..=vehicles).collect();
            let result =
                runtime_bench(&map, &gap_model, &accel_model, &counts, trials, horizon, seed)?;
            println!("n_vehicles  mean_ms   std_ms");
            for (n, mean, std) in &result.rows {
                println!("{n:>10}  {mean:>8.4}  {std:>7.4}");
            }
            let (a, b, c) = result.fit;
            println!(
                "quadratic fit: {a:.3e} n^2 + {b:.3e} n + {c:.3e}   (R^2 = {:.4})",
                result.r_squared
            );
            if let Some(path) = &out {
                std::fs::write(path, result.to_table())?;
            }
            append_run_log(
                &log,
                serde_json::json!({"cmd": "bench", "trials": trials,
                    "max_vehicles": vehicles,
                    "mean_ms_at_max": result.mean_at(vehicles),
                    "r_squared": result.r_squared}),
            );
        }
    }
    Ok(())
}
