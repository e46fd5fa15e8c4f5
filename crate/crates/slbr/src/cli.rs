//! Command-line entry points: dataset synthesis, training, evaluation,
//! single-image inference, and the ablation grid.
//!
//! Configuration is a flat `key = value` file with dotted namespaces
//! (`network.n_cff = 3`); `--set key=value` overrides win over file
//! values, and the `--seed`/`--out` flags win over both. Keys must be
//! from the known set — a typo is an input error, not a silent no-op.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autograd::ParamStore;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::Scope;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_corpus, evaluate_network};
use crate::image_data::{Image, Mask};
use crate::network::{Checkpoint, NetworkConfig, SlbrNetwork};
use crate::objectives::PerceptualExtractor;
use crate::synth::{
    generate_dataset, make_sample, random_spec, read_dataset, stream_rng, write_dataset, Sample,
    WatermarkAsset,
};
use crate::train::{
    resume, run_ablation_grid, train, write_history_csv, AblationToggles, TrainConfig,
};

/// Extractor seed used when no pretrained weights are supplied.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 2;

/// Environment variable naming a pretrained feature-extractor file.
pub const VGG_WEIGHTS_ENV: &str = "SLBR_VGG_WEIGHTS";

#[derive(Parser)]
#[command(name = "slbr", about = "Visible-watermark removal toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic watermarked dataset.
    Synth(CommonArgs),
    /// Train the two-stage network on a dataset.
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(CommonArgs),
    /// Remove the watermark from one image.
    Infer {
        /// Image to process; outputs are written beside it.
        input: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train and compare module-toggle variants on one dataset.
    Ablate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value configuration file with dotted namespaces.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable); wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts (key: out; default ".").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (key: seed; default 0).
    #[arg(long)]
    seed: Option<u64>,
}

/// Every key the configuration understands. Unknown keys are refused.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "dataset",
    "checkpoint",
    "out",
    "train.lr",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.image_size",
    "train.max_steps",
    "train.checkpoint_every",
    "train.lr_decay_every",
    "train.lr_decay_factor",
    "train.clip_grad_norm",
    "weights.lambda_vgg",
    "weights.lambda_mask",
    "network.toy",
    "network.encoder_channels",
    "network.refine_channels",
    "network.n_cff",
    "network.n_smr",
    "network.n_mbe",
    "network.n_skip_stage",
    "network.residual_depth",
    "network.use_refinement",
    "network.refine_unet",
    "synth.count",
    "synth.image_size",
    "synth.alpha_lo",
    "synth.alpha_hi",
    "synth.backgrounds",
    "synth.watermarks",
    "ablate.rows",
];

/// Flat dotted-key configuration resolved from file plus overrides.
#[derive(Debug)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn empty() -> Self {
        KvConfig {
            map: BTreeMap::new(),
        }
    }

    /// Reads `file` (if any), then applies `sets` in order; later
    /// values win. All keys are validated against the known set.
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut kv = KvConfig::empty();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected `key = value`, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                kv.insert(k.trim(), v.trim())?;
            }
        }
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("--set needs KEY=VALUE, got `{s}`"))
            })?;
            kv.insert(k.trim(), v.trim())?;
        }
        Ok(kv)
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::InvalidInput(format!(
                "unknown configuration key `{key}`"
            )));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key).ok_or_else(|| {
            Error::InvalidInput(format!("configuration key `{key}` is required"))
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }
}

fn parse_usize_list<const N: usize>(key: &str, raw: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| Error::Config(format!("key `{key}`: bad entry `{p}`: {e}")))
        })
        .collect::<Result<_>>()?;
    items.try_into().map_err(|v: Vec<usize>| {
        Error::Config(format!("key `{key}`: expected {N} entries, got {}", v.len()))
    })
}

/// Assembles the network configuration from `network.*` keys.
pub fn build_network_config(kv: &KvConfig) -> Result<NetworkConfig> {
    let mut c = if kv.get_or("network.toy", false)? {
        NetworkConfig::toy()
    } else {
        NetworkConfig::default()
    };
    if let Some(raw) = kv.get_str("network.encoder_channels") {
        c.encoder_channels = parse_usize_list("network.encoder_channels", raw)?;
    }
    if let Some(raw) = kv.get_str("network.refine_channels") {
        c.refine_channels = parse_usize_list("network.refine_channels", raw)?;
    }
    if let Some(v) = kv.get("network.n_cff")? {
        c.n_cff = v;
    }
    if let Some(v) = kv.get("network.n_smr")? {
        c.n_smr = v;
    }
    if let Some(v) = kv.get("network.n_mbe")? {
        c.n_mbe = v;
    }
    if let Some(v) = kv.get("network.n_skip_stage")? {
        c.n_skip_stage = v;
    }
    if let Some(v) = kv.get("network.residual_depth")? {
        c.residual_depth = v;
    }
    if let Some(v) = kv.get("network.use_refinement")? {
        c.use_refinement = v;
    }
    if let Some(v) = kv.get("network.refine_unet")? {
        c.refine_unet = v;
    }
    Ok(c)
}

/// Assembles the full training configuration from `train.*`,
/// `weights.*`, `network.*`, and `seed`.
pub fn build_train_config(kv: &KvConfig) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(v) = kv.get("train.lr")? {
        c.lr = v;
    }
    if let Some(v) = kv.get("train.batch_size")? {
        c.batch_size = v;
    }
    if let Some(v) = kv.get("train.beta1")? {
        c.beta1 = v;
    }
    if let Some(v) = kv.get("train.beta2")? {
        c.beta2 = v;
    }
    if let Some(v) = kv.get("train.image_size")? {
        c.image_size = v;
    }
    if let Some(v) = kv.get("train.max_steps")? {
        c.max_steps = v;
    }
    if let Some(v) = kv.get("train.checkpoint_every")? {
        c.checkpoint_every = v;
    }
    if let Some(v) = kv.get("train.lr_decay_every")? {
        c.lr_decay_every = v;
    }
    if let Some(v) = kv.get("train.lr_decay_factor")? {
        c.lr_decay_factor = v;
    }
    if let Some(v) = kv.get("train.clip_grad_norm")? {
        c.clip_grad_norm = v;
    }
    if let Some(v) = kv.get("weights.lambda_vgg")? {
        c.weights.lambda_vgg = v;
    }
    if let Some(v) = kv.get("weights.lambda_mask")? {
        c.weights.lambda_mask = v;
    }
    c.seed = kv.get_or("seed", 0)?;
    c.network = build_network_config(kv)?;
    Ok(c)
}

/// Parses arguments and runs one subcommand; returns the process exit
/// code (0 success, 2 input error, 3 compatibility, 4 numeric abort).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Synth(c) => resolve(c).and_then(|kv| cmd_synth(&kv)),
        Cmd::Train(c) => resolve(c).and_then(|kv| cmd_train(&kv)),
        Cmd::Eval(c) => resolve(c).and_then(|kv| cmd_eval(&kv)),
        Cmd::Infer { input, common } => {
            resolve(common).and_then(|kv| cmd_infer(&kv, input.as_deref()))
        }
        Cmd::Ablate(c) => resolve(c).and_then(|kv| cmd_ablate(&kv)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Merges the config file, --set overrides, and the flag shorthands
/// (flags win).
fn resolve(common: &CommonArgs) -> Result<KvConfig> {
    let mut kv = KvConfig::from_sources(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        kv.insert("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        kv.insert("out", &out.display().to_string())?;
    }
    Ok(kv)
}

fn out_dir(kv: &KvConfig) -> PathBuf {
    PathBuf::from(kv.get_str("out").unwrap_or("."))
}

/// Loads the extractor named by the environment, or falls back to the
/// seeded one with a notice on stderr.
fn resolve_extractor() -> Result<PerceptualExtractor> {
    match std::env::var_os(VGG_WEIGHTS_ENV) {
        Some(path) => PerceptualExtractor::from_file(Path::new(&path)),
        None => {
            eprintln!("notice: {VGG_WEIGHTS_ENV} not set; using the seeded feature extractor");
            Ok(PerceptualExtractor::seeded(DEFAULT_EXTRACTOR_SEED))
        }
    }
}

/// Rebuilds a network and its parameter values from a checkpoint.
fn instantiate(ckpt: &Checkpoint) -> Result<(SlbrNetwork, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = SlbrNetwork::new(
        &mut Scope {
            store: &mut store,
            rng: &mut rng,
        },
        &ckpt.network,
    );
    ckpt.apply_to(&mut store)?;
    Ok((net, store))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no PNG files in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// Composites one watermark per background image. Sample `i` uses
/// background `i mod n`, a seeded watermark pick, and a seeded
/// placement, so reruns are byte-identical.
fn compose_from_assets(
    bg_dir: &Path,
    wm_dir: &Path,
    count: Option<usize>,
    alpha: (f64, f64),
    seed: u64,
) -> Result<Vec<Sample>> {
    let bgs = sorted_pngs(bg_dir)?;
    let wms = sorted_pngs(wm_dir)?;
    let n = count.unwrap_or(bgs.len());
    (0..n)
        .map(|i| {
            let bg = Image::load_png(&bgs[i % bgs.len()])?;
            if bg.h() != bg.w() {
                return Err(Error::InvalidInput(format!(
                    "background {} is {}x{}; square images required",
                    bgs[i % bgs.len()].display(),
                    bg.h(),
                    bg.w()
                )));
            }
            let mut rng = stream_rng(seed, i as u64);
            let asset = WatermarkAsset::load_png(&wms[rng.random_range(0..wms.len())])?;
            let spec = random_spec(&mut rng, &asset, bg.h(), alpha, seed);
            make_sample(&bg, &asset, &spec)
        })
        .collect()
}

fn cmd_synth(kv: &KvConfig) -> Result<()> {
    let dest = PathBuf::from(kv.require_str("dataset")?);
    let seed = kv.get_or("seed", 0)?;
    let alpha = (
        kv.get_or("synth.alpha_lo", 0.4)?,
        kv.get_or("synth.alpha_hi", 0.9)?,
    );
    if !(0.0..=1.0).contains(&alpha.0) || !(0.0..=1.0).contains(&alpha.1) || alpha.0 > alpha.1 {
        return Err(Error::InvalidInput(format!(
            "alpha range {}..{} is not an ordered subrange of 0..1",
            alpha.0, alpha.1
        )));
    }
    let count = kv.get::<usize>("synth.count")?;
    let samples = match (kv.get_str("synth.backgrounds"), kv.get_str("synth.watermarks")) {
        (Some(bg), Some(wm)) => {
            compose_from_assets(Path::new(bg), Path::new(wm), count, alpha, seed)?
        }
        (None, None) => {
            let count = count.ok_or_else(|| {
                Error::InvalidInput("synth.count is required for procedural synthesis".into())
            })?;
            let size = kv.get_or("synth.image_size", 256)?;
            generate_dataset(count, size, alpha, seed)
        }
        _ => {
            return Err(Error::InvalidInput(
                "asset synthesis needs both synth.backgrounds and synth.watermarks".into(),
            ))
        }
    };
    let manifest = write_dataset(&samples, &dest, seed)?;
    println!(
        "wrote {} samples to {} (seed {}, peak alpha {:.3}..{:.3})",
        manifest.count,
        dest.display(),
        manifest.seed,
        manifest.alpha_min,
        manifest.alpha_max
    );
    Ok(())
}

fn cmd_train(kv: &KvConfig) -> Result<()> {
    let config = build_train_config(kv)?;
    let (samples, _) = read_dataset(Path::new(kv.require_str("dataset")?))?;
    let extractor = resolve_extractor()?;
    let out = out_dir(kv);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outcome = match kv.get_str("checkpoint") {
        Some(path) => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            resume(&ckpt, &config, &samples, &extractor, Some(&out))?
        }
        None => train(&config, &samples, &extractor, Some(&out))?,
    };
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    let last = outcome.history.last().expect("at least one step");
    println!(
        "trained to step {} (total loss {:.4}); wrote {}",
        outcome.checkpoint.step,
        last.losses.total,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(kv: &KvConfig) -> Result<()> {
    let (samples, _) = read_dataset(Path::new(kv.require_str("dataset")?))?;
    let spec = kv.require_str("checkpoint")?;
    let report = if spec == "identity" {
        // Pass-through stub: prediction = input, empty mask. Useful as
        // a floor and for metric plumbing checks.
        evaluate_corpus(
            |s| {
                (
                    s.watermarked.clone(),
                    Mask::zeros(s.watermarked.h(), s.watermarked.w()),
                )
            },
            &samples,
        )?
    } else {
        let ckpt = Checkpoint::load(Path::new(spec))?;
        let (net, store) = instantiate(&ckpt)?;
        evaluate_network(&net, &store, &samples)?
    };
    let out = out_dir(kv);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("metrics.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    println!("{}", report.summary());
    Ok(())
}

/// Smallest legal network input size not below `n`: a multiple of 16,
/// at least 32.
fn pad_target(n: usize) -> usize {
    n.div_ceil(16).max(2) * 16
}

/// Index into `0..n` for a reflected (mirror, edge included once)
/// extension of the signal, valid for any target length.
fn reflect_index(i: usize, n: usize) -> usize {
    let period = 2 * n - 2;
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn reflect_pad(img: &Image, th: usize, tw: usize) -> Image {
    Image::from_fn(th, tw, |c, i, j| {
        img.data()[[c, reflect_index(i, img.h()), reflect_index(j, img.w())]]
    })
}

fn crop_image(img: &Image, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |c, i, j| img.data()[[c, i, j]])
}

fn crop_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |i, j| mask.data()[[i, j]])
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.png"))
}

fn cmd_infer(kv: &KvConfig, input: Option<&Path>) -> Result<()> {
    let input = input.ok_or_else(|| {
        Error::InvalidInput("infer needs an input image path".into())
    })?;
    let ckpt = Checkpoint::load(Path::new(kv.require_str("checkpoint")?))?;
    let (net, store) = instantiate(&ckpt)?;
    let img = Image::load_png(input)?;
    let (h, w) = (img.h(), img.w());
    let (th, tw) = (pad_target(h), pad_target(w));
    let padded = if (th, tw) == (h, w) {
        img
    } else {
        reflect_pad(&img, th, tw)
    };
    let (coarse, refined) = net.slbr_forward(&store, &padded);
    let mask = &coarse.mask_pairs.last().expect("mask scales").m_hat_prime;
    crop_image(&refined.i_refined, h, w).save_png(&with_suffix(input, "_refined"))?;
    crop_image(&coarse.i_coarse, h, w).save_png(&with_suffix(input, "_coarse"))?;
    crop_mask(mask, h, w).save_png(&with_suffix(input, "_mask"))?;
    println!(
        "wrote {} (+_coarse, +_mask)",
        with_suffix(input, "_refined").display()
    );
    Ok(())
}

fn parse_ablate_rows(raw: &str) -> Result<Vec<usize>> {
    let rows: Vec<usize> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("ablate.rows: bad entry `{p}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() || rows.iter().any(|r| !(1..=13).contains(r)) {
        return Err(Error::Config(
            "ablate.rows must list row numbers in 1..=13".into(),
        ));
    }
    Ok(rows)
}

fn cmd_ablate(kv: &KvConfig) -> Result<()> {
    let base = build_train_config(kv)?;
    let (samples, _) = read_dataset(Path::new(kv.require_str("dataset")?))?;
    let row_numbers = parse_ablate_rows(kv.get_str("ablate.rows").unwrap_or("1,5,9,12"))?;
    let staged = AblationToggles::staged_rows();
    let toggles: Vec<AblationToggles> = row_numbers.iter().map(|r| staged[r - 1]).collect();
    let extractor = resolve_extractor()?;
    let rows = run_ablation_grid(&base, &toggles, &samples, &extractor)?;

    let out = out_dir(kv);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut csv = String::from("row,n_smr,n_mbe,n_cff,n_skip_stage,psnr,ssim,rmse,rmsew\n");
    println!(
        "{:>4} {:>5} {:>5} {:>5} {:>12} {:>8} {:>7} {:>7} {:>7}",
        "row", "n_smr", "n_mbe", "n_cff", "n_skip_stage", "psnr", "ssim", "rmse", "rmsew"
    );
    for (number, row) in row_numbers.iter().zip(&rows) {
        let t = row.toggles;
        let m = &row.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            number, t.n_smr, t.n_mbe, t.n_cff, t.n_skip_stage, m.psnr, m.ssim, m.rmse, m.rmsew
        ));
        println!(
            "{:>4} {:>5} {:>5} {:>5} {:>12} {:>8.2} {:>7.4} {:>7.3} {:>7.3}",
            number, t.n_smr, t.n_mbe, t.n_cff, t.n_skip_stage, m.psnr, m.ssim, m.rmse, m.rmsew
        );
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}
