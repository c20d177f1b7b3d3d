use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roadbev::boxes::ObjectClass;
use roadbev::config::Config;
use roadbev::eval::{evaluate, GroundTruth, SceneResult};
use roadbev::head::{Detection, DetectionRecord};
use roadbev::model::Model;
use roadbev::scene::{
    generate_scene, list_scenes, load_scene, render_bev_detections, render_feature_map, scene_seed, write_scene,
    SceneRecord,
};
use roadbev::train::{bev_features, detect, prepare_scene, train, PreparedScene};

#[derive(Parser)]
#[command(name = "hf", version, about = "Monocular roadside 3D detection in bird's-eye view")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config with dotted keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scene folders.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a scene directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate [default: 2e-4].
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write detections for every scene as JSON lines.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against scene labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, alias = "scenes")]
        gts: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        /// Comma-separated class names [default: all].
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<ObjectClass>>,
    },
    /// Draw ground truth and detections (and BEV features with --model) per scene.
    RenderBev {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        /// Pixels per BEV cell.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

fn load_config(common: &Common) -> Outcome<Config> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(data(p.display()))?;
            Config::from_flat_json(&text).map_err(data(p.display()))?
        }
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: Config) -> Outcome<Config> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_scenes(dir: &Path) -> Outcome<Vec<SceneRecord>> {
    let dirs = list_scenes(dir).map_err(|e| Failure::Data(e.to_string()))?;
    if dirs.is_empty() {
        return Err(Failure::Data(format!("{}: no scene folders", dir.display())));
    }
    dirs.iter().map(|d| load_scene(d).map_err(|e| Failure::Data(e.to_string()))).collect()
}

fn load_model(path: &Path) -> Outcome<Model> {
    let text = fs::read_to_string(path).map_err(data(path.display()))?;
    Model::from_json(&text).map_err(data(path.display()))
}

fn prepare_all(model: &Model, records: &[SceneRecord]) -> Outcome<Vec<PreparedScene>> {
    records.iter().map(|r| prepare_scene(model, r).map_err(|e| Failure::Data(e.to_string()))).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data(parent.display()))?;
    }
    fs::write(path, bytes).map_err(data(path.display()))
}

/// Detections keyed by scene id; records without an id belong to `default_id`.
fn read_predictions(path: &Path, default_id: Option<&str>) -> Outcome<BTreeMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(data(path.display()))?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("{} line {}", path.display(), i + 1);
        let rec: DetectionRecord = serde_json::from_str(line).map_err(data(at()))?;
        let det = rec.detection().map_err(data(at()))?;
        let id = match rec.scene.as_deref().or(default_id) {
            Some(id) => id.to_string(),
            None => return Err(Failure::Data(format!("{}: detection without a scene id", at()))),
        };
        out.entry(id).or_default().push(det);
    }
    Ok(out)
}

fn ground_truth(record: &SceneRecord) -> Vec<GroundTruth> {
    record.objects().0.into_iter().map(|o| GroundTruth { bbox: o.bbox, class: o.class, difficulty: o.difficulty }).collect()
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { common, count, out } => {
            let cfg = checked(load_config(&common)?)?;
            for i in 0..count {
                let scene = generate_scene(&cfg.synth, scene_seed(cfg.seed, i as u64)).map_err(data(format!("scene {i}")))?;
                write_scene(&out, &format!("{i:06}"), &scene).map_err(|e| Failure::Data(e.to_string()))?;
            }
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { common, scenes, out, steps, lr } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.optimizer.lr = lr;
            }
            let cfg = checked(cfg)?;
            let records = load_scenes(&scenes)?;
            let mut model = Model::new(cfg.model.clone(), cfg.seed).map_err(|e| Failure::Usage(e.to_string()))?;
            let prepared = prepare_all(&model, &records)?;
            let log = train(&mut model, &prepared, &cfg.train).map_err(|e| Failure::Data(e.to_string()))?;
            write_file(&out, model.to_json().as_bytes())?;
            println!(
                "{}",
                serde_json::json!({"initial_loss": log.initial_loss, "final_loss": log.final_loss, "steps": cfg.train.steps})
            );
        }
        Command::Infer { common, model, scenes, out } => {
            let cfg = checked(load_config(&common)?)?;
            let model = load_model(&model)?;
            let records = load_scenes(&scenes)?;
            let mut lines = String::new();
            for p in prepare_all(&model, &records)? {
                for d in detect(&model, &p.input, &cfg.detect).map_err(|e| Failure::Data(e.to_string()))? {
                    let rec = DetectionRecord::new(Some(p.id.clone()), &d);
                    lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                    lines.push('\n');
                }
            }
            write_file(&out, lines.as_bytes())?;
        }
        Command::Eval { common, preds, gts, out, iou, classes } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = iou {
                cfg.eval.iou_thr = t;
            }
            let cfg = checked(cfg)?;
            let records = load_scenes(&gts)?;
            let single = (records.len() == 1).then(|| records[0].id.as_str());
            let mut by_scene = read_predictions(&preds, single)?;
            let results: Vec<SceneResult> = records
                .iter()
                .map(|r| SceneResult { gts: ground_truth(r), preds: by_scene.remove(&r.id).unwrap_or_default() })
                .collect();
            if let Some(id) = by_scene.keys().next() {
                return Err(Failure::Data(format!("{}: scene `{id}` is not in {}", preds.display(), gts.display())));
            }
            let classes = classes.unwrap_or_else(|| ObjectClass::ALL.to_vec());
            let report = evaluate(&results, &classes, &cfg.eval).map_err(|e| Failure::Data(e.to_string()))?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            match out {
                Some(p) => write_file(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::RenderBev { common, scenes, out, preds, model, iou, scale } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = iou {
                cfg.eval.iou_thr = t;
            }
            let cfg = checked(cfg)?;
            let records = load_scenes(&scenes)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let spec = model.as_ref().map_or(cfg.model.bev, |m| m.config.bev);
            let single = (records.len() == 1).then(|| records[0].id.as_str());
            let mut given = preds.as_deref().map(|p| read_predictions(p, single)).transpose()?;
            for r in &records {
                let gts: Vec<_> = r.objects().0.into_iter().map(|o| (o.bbox, o.class)).collect();
                let mut dets = given.as_mut().and_then(|g| g.remove(&r.id)).unwrap_or_default();
                if let Some(m) = &model {
                    let p = prepare_scene(m, r).map_err(|e| Failure::Data(e.to_string()))?;
                    if given.is_none() {
                        dets = detect(m, &p.input, &cfg.detect).map_err(|e| Failure::Data(e.to_string()))?;
                    }
                    let f = bev_features(m, &p.input).map_err(|e| Failure::Data(e.to_string()))?;
                    write_file(&out.join(format!("{}_features.ppm", r.id)), &render_feature_map(&f).to_ppm())?;
                }
                let img = render_bev_detections(&spec, &gts, &dets, cfg.eval.iou_thr, scale);
                write_file(&out.join(format!("{}.ppm", r.id)), &img.to_ppm())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
