//! `bsnet` subcommands. Every command resolves its settings as
//! built-in defaults < `--config` file < flags, and writes the resolved
//! settings to `<out>/<command>.cfg` before doing any work.

pub mod jet;

use std::path::{Path, PathBuf};

use bsnet_core::data::{
    load_manifest, preprocess_eval, synthetic_set, write_dataset, PreprocessSpec, SyntheticSceneSpec,
};
use bsnet_core::io::{read_rgb, write_mask, write_raw_depth, write_rgb8};
use bsnet_core::kv::KvConfig;
use bsnet_core::metrics::{boundary_mask, MetricConfig};
use bsnet_core::ops::{resize_bilinear, resize_depth};
use bsnet_core::{DepthMap, RgbImage};
use bsnet_net::checkpoint::{load_network, Checkpoint};
use bsnet_net::network::{Network, NetworkConfig, Variant};
use bsnet_net::train::{evaluate_predictions, predict_dataset, train_loop, TrainConfig, Trainer};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
        }
    }
}

impl From<bsnet_core::Error> for CliError {
    fn from(e: bsnet_core::Error) -> Self {
        use bsnet_core::Error as E;
        match e {
            E::Config(_) | E::InvalidSpec(_) | E::NonPositiveAlpha(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<bsnet_net::Error> for CliError {
    fn from(e: bsnet_net::Error) -> Self {
        use bsnet_net::Error as E;
        match e {
            E::Diverged { .. } => CliError::Diverged(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            E::Core(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "bsnet", version, about = "Boundary-aware monocular depth prediction on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic RGB-D dataset with a manifest
    Synth(SynthArgs),
    /// Train a network on a manifest
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a manifest
    Eval(EvalArgs),
    /// Predict depth for one image and colorize it
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// HxW, e.g. 64x64
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub boxes: Option<usize>,
    /// min,max in meters
    #[arg(long)]
    pub depth_range: Option<String>,
    /// u,v,m (1-based cell of an m x m grid) pinned as farthest in every scene
    #[arg(long)]
    pub farthest_cell: Option<String>,
    /// Pin a seed-dependent farthest cell of an m x m grid in each scene
    #[arg(long)]
    pub pin_grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network preset: full or tiny
    #[arg(long)]
    pub preset: Option<String>,
    /// baseline, dce, bubf-srm or full
    #[arg(long)]
    pub variant: Option<String>,
    /// `nyud` or a square side such as 64
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64 (f64 runs are bitwise reproducible)
    #[arg(long)]
    pub dtype: Option<String>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid sizes for the farthest-region error
    #[arg(long)]
    pub m: Option<String>,
    /// Boundary thresholds
    #[arg(long)]
    pub te: Option<String>,
    /// `nyud` or a square side; defaults to the checkpoint's training input
    #[arg(long)]
    pub input: Option<String>,
    /// Expected network preset; a mismatch with the checkpoint is reported
    #[arg(long)]
    pub preset: Option<String>,
    /// Score the ground truth against itself instead of a network
    #[arg(long)]
    pub oracle_gt: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the thresholded Sobel boundary mask of the prediction
    #[arg(long)]
    pub boundary: bool,
    #[arg(long)]
    pub te: Option<f64>,
    /// `nyud` or a square side; defaults to the checkpoint's training input
    #[arg(long)]
    pub input: Option<String>,
}

/// defaults < file < flags
fn resolve(defaults: &[(&str, String)], file: Option<&Path>, flags: &[(&str, Option<String>)]) -> CliResult<KvConfig> {
    let mut cfg = KvConfig::new();
    for (k, v) in defaults {
        cfg.set(k, v);
    }
    if let Some(path) = file {
        cfg.merge(&KvConfig::load(path)?);
    }
    let mut over = KvConfig::new();
    for (k, v) in flags {
        if let Some(v) = v {
            over.set(k, v);
        }
    }
    cfg.merge(&over);
    Ok(cfg)
}

fn get<T: std::str::FromStr>(cfg: &KvConfig, key: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    cfg.get_parsed::<T>(key)?.ok_or_else(|| usage(format!("missing `{key}`")))
}

fn get_str<'a>(cfg: &'a KvConfig, key: &str) -> CliResult<&'a str> {
    cfg.get(key).filter(|v| !v.is_empty()).ok_or_else(|| usage(format!("missing `{key}`")))
}

fn opt_str<'a>(cfg: &'a KvConfig, key: &str) -> Option<&'a str> {
    cfg.get(key).filter(|v| !v.is_empty())
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    let items = text
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| usage(format!("bad {what} entry `{s}` in `{text}`"))))
        .collect::<CliResult<Vec<T>>>()?;
    if items.is_empty() {
        return Err(usage(format!("empty {what} list")));
    }
    Ok(items)
}

fn parse_size(text: &str) -> CliResult<(usize, usize)> {
    let (h, w) = text.split_once('x').ok_or_else(|| usage(format!("size `{text}` is not HxW")))?;
    let p = |s: &str| s.trim().parse::<usize>().map_err(|_| usage(format!("size `{text}` is not HxW")));
    Ok((p(h)?, p(w)?))
}

pub fn parse_input(text: &str) -> CliResult<PreprocessSpec> {
    let spec = match text {
        "nyud" => PreprocessSpec::nyud(),
        side => {
            let n: usize = side
                .parse()
                .map_err(|_| usage(format!("input `{side}` is neither `nyud` nor a square side")))?;
            PreprocessSpec::square(n)
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_dtype(text: &str) -> CliResult<DType> {
    match text {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(usage(format!("dtype must be f32 or f64, not `{other}`"))),
    }
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn save_config(cfg: &KvConfig, out: &Path, name: &str) -> CliResult<()> {
    Ok(cfg.save(&out.join(format!("{name}.cfg")))?)
}

/// Reads `BSNET_THREADS` and caps the convolution workers.
pub fn apply_thread_env() -> CliResult<()> {
    if let Ok(v) = std::env::var("BSNET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("BSNET_THREADS must be a positive integer, not `{v}`")))?;
        if n == 0 {
            return Err(usage("BSNET_THREADS must be at least 1"));
        }
        bsnet_net::kernels::set_threads(n);
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    apply_thread_env()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = resolve(
        &[
            ("n", "8".into()),
            ("seed", "0".into()),
            ("size", "64x64".into()),
            ("boxes", "3".into()),
            ("depth_range", "1,10".into()),
            ("farthest_cell", String::new()),
            ("pin_grid", String::new()),
        ],
        a.config.as_deref(),
        &[
            ("n", a.n.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
            ("size", a.size.clone()),
            ("boxes", a.boxes.map(|v| v.to_string())),
            ("depth_range", a.depth_range.clone()),
            ("farthest_cell", a.farthest_cell.clone()),
            ("pin_grid", a.pin_grid.map(|v| v.to_string())),
        ],
    )?;
    let n: usize = get(&cfg, "n")?;
    let range: Vec<f64> = parse_list(get_str(&cfg, "depth_range")?, "depth range")?;
    if range.len() != 2 {
        return Err(usage("depth_range takes min,max"));
    }
    let farthest_cell = match opt_str(&cfg, "farthest_cell") {
        Some(s) => {
            let v: Vec<usize> = parse_list(s, "farthest cell")?;
            if v.len() != 3 {
                return Err(usage("farthest_cell takes u,v,m"));
            }
            Some((v[0], v[1], v[2]))
        }
        None => None,
    };
    let pin_grid = opt_str(&cfg, "pin_grid")
        .map(|s| s.parse::<usize>().map_err(|_| usage(format!("bad pin_grid `{s}`"))))
        .transpose()?;
    if farthest_cell.is_some() && pin_grid.is_some() {
        return Err(usage("farthest_cell and pin_grid are exclusive"));
    }
    let base = SyntheticSceneSpec {
        size: parse_size(get_str(&cfg, "size")?)?,
        n_boxes: get(&cfg, "boxes")?,
        depth_range: (range[0], range[1]),
        farthest_cell,
        seed: get(&cfg, "seed")?,
    };
    base.validate()?;
    prepare_out(&a.out)?;
    save_config(&cfg, &a.out, "synth")?;
    let pairs = synthetic_set(&base, n, pin_grid)?;
    let manifest = write_dataset(&a.out, &pairs)?;
    log::info!("wrote {} scenes, manifest {}", pairs.len(), manifest.display());
    Ok(())
}

fn train_defaults() -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    vec![
        ("manifest", String::new()),
        ("preset", "full".into()),
        ("variant", "full".into()),
        ("input", String::new()),
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr", t.lr0.to_string()),
        ("lr_decay", t.lr_decay.to_string()),
        ("decay_every", t.decay_every.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("alpha", t.alpha.to_string()),
        ("seed", t.seed.to_string()),
        ("dtype", "f32".into()),
        ("resume", String::new()),
    ]
}

/// Input geometry a preset trains on when `--input` is not given.
fn preset_input(preset: &str) -> &'static str {
    match preset {
        "tiny" => "64",
        _ => "nyud",
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let path_flag = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let cfg = resolve(
        &train_defaults(),
        a.config.as_deref(),
        &[
            ("manifest", path_flag(&a.manifest)),
            ("preset", a.preset.clone()),
            ("variant", a.variant.clone()),
            ("input", a.input.clone()),
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
            ("lr_decay", a.lr_decay.map(|v| v.to_string())),
            ("decay_every", a.decay_every.map(|v| v.to_string())),
            ("weight_decay", a.weight_decay.map(|v| v.to_string())),
            ("alpha", a.alpha.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
            ("dtype", a.dtype.clone()),
            ("resume", path_flag(&a.resume)),
        ],
    )?;
    let train = TrainConfig {
        epochs: get(&cfg, "epochs")?,
        batch_size: get(&cfg, "batch_size")?,
        lr0: get(&cfg, "lr")?,
        lr_decay: get(&cfg, "lr_decay")?,
        decay_every: get(&cfg, "decay_every")?,
        weight_decay: get(&cfg, "weight_decay")?,
        alpha: get(&cfg, "alpha")?,
        seed: get(&cfg, "seed")?,
        ..TrainConfig::default()
    };
    train.validate()?;
    let preset = get_str(&cfg, "preset")?;
    let variant: Variant = get_str(&cfg, "variant")?.parse()?;
    let net_cfg = NetworkConfig::preset(preset)?.with_variant(variant);
    net_cfg.validate()?;
    let spec = parse_input(opt_str(&cfg, "input").unwrap_or(preset_input(preset)))?;
    let dtype = parse_dtype(get_str(&cfg, "dtype")?)?;
    let manifest = PathBuf::from(get_str(&cfg, "manifest")?);

    prepare_out(&a.out)?;
    save_config(&cfg, &a.out, "train")?;
    let data = load_manifest(&manifest)?;

    let mut trainer = match opt_str(&cfg, "resume") {
        Some(p) => {
            let mut t = Trainer::resume(Path::new(p))?;
            if t.network().config() != &net_cfg {
                log::warn!("resuming with the checkpoint's network, which differs from the requested preset");
            }
            *t.config_mut() = train;
            t
        }
        None => {
            let net = Network::new(&net_cfg, dtype, train.seed)?;
            Trainer::new(net, train, spec)?
        }
    };
    // A fresh log for a fresh run; resumed runs keep appending.
    let log_path = a.out.join("train.log");
    if opt_str(&cfg, "resume").is_none() && log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| io_err(&log_path, e))?;
    }
    let history = train_loop(&mut trainer, &data, Some(&a.out))?;
    if let Some(last) = history.last() {
        log::info!("finished {} epochs, l_overall {:.6}", trainer.epoch(), last.l_overall);
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let path_flag = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let cfg = resolve(
        &[
            ("manifest", String::new()),
            ("checkpoint", String::new()),
            ("m", "6,12,24".into()),
            ("te", "0.25,0.5,1".into()),
            ("input", String::new()),
            ("preset", String::new()),
            ("oracle_gt", "false".into()),
        ],
        a.config.as_deref(),
        &[
            ("manifest", path_flag(&a.manifest)),
            ("checkpoint", path_flag(&a.checkpoint)),
            ("m", a.m.clone()),
            ("te", a.te.clone()),
            ("input", a.input.clone()),
            ("preset", a.preset.clone()),
            ("oracle_gt", a.oracle_gt.then(|| "true".to_string())),
        ],
    )?;
    let metric = MetricConfig {
        boundary_thresholds: parse_list(get_str(&cfg, "te")?, "threshold")?,
        grid_sizes: parse_list(get_str(&cfg, "m")?, "grid size")?,
    };
    let oracle: bool = get(&cfg, "oracle_gt")?;
    let manifest = PathBuf::from(get_str(&cfg, "manifest")?);

    let checkpoint = if oracle {
        None
    } else {
        let p = PathBuf::from(get_str(&cfg, "checkpoint").map_err(|_| usage("eval needs --checkpoint or --oracle-gt"))?);
        Some(Checkpoint::load(&p).map(|ck| (p, ck))?)
    };
    if let (Some((_, ck)), Some(preset)) = (&checkpoint, opt_str(&cfg, "preset")) {
        let want = NetworkConfig::preset(preset)?.with_variant(ck.network.variant);
        if want.fingerprint() != ck.network.fingerprint() {
            log::warn!(
                "checkpoint fingerprint {} does not match preset `{preset}` ({}); using the checkpoint's network",
                &ck.network.fingerprint()[..12],
                &want.fingerprint()[..12]
            );
        }
    }
    let spec = match (opt_str(&cfg, "input"), checkpoint.as_ref().and_then(|(_, ck)| ck.preprocess)) {
        (Some(s), _) => parse_input(s)?,
        (None, Some(spec)) => spec,
        (None, None) => PreprocessSpec::nyud(),
    };

    prepare_out(&a.out)?;
    save_config(&cfg, &a.out, "eval")?;
    let data = load_manifest(&manifest)?;
    let pairs = match checkpoint {
        None => data
            .iter()
            .map(|p| preprocess_eval(p, &spec).map(|(_, g)| (g.clone(), g)))
            .collect::<Result<Vec<_>, _>>()?,
        Some((path, ck)) => {
            let net = ck.restore_network().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            predict_dataset(&net, &data, &spec)?
        }
    };
    let report = evaluate_predictions(&pairs, &metric)?;
    let json_path = a.out.join("report.json");
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| io_err(&json_path, e))?;
    let table_path = a.out.join("report.txt");
    std::fs::write(&table_path, report.to_table()).map_err(|e| io_err(&table_path, e))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Jet-colorized depth: the nearest valid pixel maps to entry 0 (blue), the
/// farthest to entry 255 (red). Invalid pixels are black.
pub fn colorize(depth: &DepthMap) -> Vec<u8> {
    let v = depth.values();
    let valid = depth.valid();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&d, &ok) in v.iter().zip(valid.iter()) {
        if ok {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = hi - lo;
    let mut out = Vec::with_capacity(v.len() * 3);
    for (&d, &ok) in v.iter().zip(valid.iter()) {
        if !ok {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let idx = if span > 0.0 {
            (((d - lo) / span) * 255.0).round().clamp(0.0, 255.0) as usize
        } else {
            0
        };
        out.extend_from_slice(&jet::JET[idx]);
    }
    out
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let path_flag = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let cfg = resolve(
        &[
            ("checkpoint", String::new()),
            ("image", String::new()),
            ("boundary", "false".into()),
            ("te", "1".into()),
            ("input", String::new()),
        ],
        a.config.as_deref(),
        &[
            ("checkpoint", path_flag(&a.checkpoint)),
            ("image", path_flag(&a.image)),
            ("boundary", a.boundary.then(|| "true".to_string())),
            ("te", a.te.map(|v| v.to_string())),
            ("input", a.input.clone()),
        ],
    )?;
    let ck_path = PathBuf::from(get_str(&cfg, "checkpoint")?);
    let image_path = PathBuf::from(get_str(&cfg, "image")?);
    let boundary: bool = get(&cfg, "boundary")?;
    let te: f64 = get(&cfg, "te")?;
    if !(te >= 0.0) {
        return Err(usage("te must be non-negative"));
    }

    let ck = Checkpoint::load(&ck_path)?;
    let spec = match (opt_str(&cfg, "input"), ck.preprocess) {
        (Some(s), _) => parse_input(s)?,
        (None, Some(spec)) => spec,
        (None, None) => PreprocessSpec::nyud(),
    };
    let image = read_rgb(&image_path)?;
    let net = load_network(&ck_path)?;

    prepare_out(&a.out)?;
    save_config(&cfg, &a.out, "predict")?;
    let (h, w) = (image.height(), image.width());
    let (ih, iw) = spec.crop_to;
    let input = RgbImage::new(resize_bilinear(image.values().view(), ih, iw)?)?;
    let depth = net.predict(&input)?;
    let full = resize_depth(&depth, h, w)?;
    write_raw_depth(&a.out.join("depth_net.bsdm"), &depth)?;
    write_raw_depth(&a.out.join("depth.bsdm"), &full)?;
    write_rgb8(&a.out.join("depth_color.png"), w, h, colorize(&full))?;
    if boundary {
        write_mask(&a.out.join("boundary.png"), &boundary_mask(full.values(), te)?)?;
    }
    Ok(())
}
