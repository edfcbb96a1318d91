use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use licda_core::checkpoint;
use licda_core::config::DataSource;
use licda_core::data::Split;
use licda_core::metrics::psnr;
use licda_core::pipeline::{self, Trained};
use licda_core::{DecodeLimits, DomainDataset, ErrorKind, Image, LicModel, PolicyKind, Report, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "licda", version, about = "Learned image codec with per-domain decoder adapters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file, or the name of a preset.
    #[arg(long, global = true, default_value = "desk")]
    config: String,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Blend policy; overrides the config where it applies.
    #[arg(long, global = true)]
    blend: Option<PolicyKind>,
    /// Restricts the run to one quality index.
    #[arg(long, global = true)]
    quality: Option<u8>,
    /// Dataset root laid out as <root>/<domain>/*.png.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory (or file, for encode and decode).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More logging.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the configured synthetic dataset as PNGs under <out>/<domain>/.
    Synth,
    /// Pretrains one backbone per quality on the source domain.
    Pretrain,
    /// Trains adapters and gate on top of pretrained backbones.
    Adapt {
        /// Directory holding backbone_q*.safetensors; defaults to --out.
        #[arg(long)]
        backbones: Option<PathBuf>,
    },
    /// Compresses a PNG into a .licb stream and prints its bpp.
    Encode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain name of the image, needed by the oracle policy.
        #[arg(long)]
        label: Option<String>,
    },
    /// Decodes a .licb stream into a PNG.
    Decode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Original image; prints the PSNR of the reconstruction.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Ignore adapters whose domain count disagrees with the stream.
        #[arg(long)]
        force_backbone: bool,
    },
    /// Evaluates adapted checkpoints on the test split and writes the report.
    Eval {
        /// Directory holding adapted_q*.safetensors; defaults to --out.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Prints a saved report.json as text tables.
    Report { input: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<licda_core::Error>()).map(|e| e.kind()) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Codec) => 4,
        Some(ErrorKind::Compat) => 5,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth => synth(c),
        Command::Pretrain => pretrain(c),
        Command::Adapt { backbones } => adapt(c, backbones.as_deref()),
        Command::Encode { input, checkpoint, label } => encode(c, input, checkpoint, label.as_deref()),
        Command::Decode { input, checkpoint, reference, force_backbone } => {
            decode(c, input, checkpoint, reference.as_deref(), *force_backbone)
        }
        Command::Eval { checkpoints } => eval(c, checkpoints.as_deref()),
        Command::Report { input } => {
            let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let report: Report = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(root) = &c.dataset {
        cfg.data.source = DataSource::Directory { root: root.clone() };
    }
    if let Some(blend) = c.blend {
        cfg.adapter.policy = blend;
    }
    if let Some(q) = c.quality {
        if !cfg.backbone.qualities.contains(&q) {
            bail!(licda_core::Error::Config(format!(
                "quality {q} is not among the configured qualities {:?}",
                cfg.backbone.qualities
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn selected(cfg: &RunConfig, c: &Common) -> Vec<u8> {
    match c.quality {
        Some(q) => vec![q],
        None => cfg.backbone.qualities.clone(),
    }
}

fn dataset(cfg: &RunConfig) -> Result<DomainDataset> {
    let ds = cfg.data.build(cfg.seed)?;
    for (label, d) in ds.domains.iter().enumerate() {
        let n = |s| ds.domain_split(label, s).len();
        log::info!("domain {label} {d}: train {} val {} test {}", n(Split::Train), n(Split::Val), n(Split::Test));
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<LicModel<f32>> {
    Ok(checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

fn save(path: &Path, t: &Trained, cfg: &RunConfig, stage: &str) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("stage".to_string(), stage.to_string());
    extra.insert("config".to_string(), cfg.name.clone());
    extra.insert("seed".to_string(), cfg.seed.to_string());
    if let Some(a) = &t.model.adaptation {
        extra.insert("blend".to_string(), a.meta.policy.to_string());
    }
    pipeline::save_trained(path, t, &extra)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn last_val(t: &Trained) -> String {
    match t.state.last(Split::Val) {
        Some(r) => {
            let mut s = format!("loss {:.5} mse {:.6}", r.loss, r.mse);
            if let Some(b) = r.bpp {
                s += &format!(" bpp {b:.4}");
            }
            if let Some(a) = r.gate_acc {
                s += &format!(" gate acc {a:.3}");
            }
            s
        }
        None => "no validation record".into(),
    }
}

fn synth(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    if !matches!(cfg.data.source, DataSource::Synthetic { .. }) {
        bail!(licda_core::Error::Config("synth needs a synthetic data source".into()));
    }
    let out = out_dir(c)?;
    let ds = dataset(&cfg)?;
    for item in &ds.items {
        let dir = out.join(&ds.domains[item.label]);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.png", item.name));
        item.load()?.save_png(&path)?;
    }
    println!("wrote {} images for {} domains to {}", ds.items.len(), ds.k() + 1, out.display());
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = out_dir(c)?;
    cfg.write_resolved(&out)?;
    let ds = dataset(&cfg)?;
    let report = |t: &Trained| {
        let q = t.model.backbone.config.quality_index;
        println!("quality {q}: {}", last_val(t));
    };
    match c.quality {
        None => {
            let mut err = None;
            pipeline::pretrain_all(&cfg, &ds, |t| {
                report(t);
                let q = t.model.backbone.config.quality_index;
                if let Err(e) = save(&pipeline::backbone_path(&out, q), t, &cfg, "pretrain") {
                    err.get_or_insert(e);
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
        }
        Some(q) => {
            let from = cfg.backbone.pretrain_order().into_iter().find(|(x, _)| *x == q).and_then(|(_, f)| f);
            let warm = match from {
                Some(f) => {
                    let path = pipeline::backbone_path(&out, f);
                    if !path.exists() {
                        bail!(licda_core::Error::Config(format!(
                            "quality {q} warm-starts from quality {f}, but {} does not exist",
                            path.display()
                        )));
                    }
                    Some(load_model(&path)?)
                }
                None => None,
            };
            let t = pipeline::pretrain_quality(&cfg, &ds, q, warm.as_ref())?;
            report(&t);
            save(&pipeline::backbone_path(&out, q), &t, &cfg, "pretrain")?;
        }
    }
    Ok(())
}

fn adapt(c: &Common, backbones: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let out = out_dir(c)?;
    let src = backbones.unwrap_or(&out).to_path_buf();
    cfg.write_resolved(&out)?;
    let ds = dataset(&cfg)?;
    for q in selected(&cfg, c) {
        let pretrained = load_model(&pipeline::backbone_path(&src, q))?;
        let t = pipeline::adapt_quality(&cfg, &ds, &pretrained)?;
        println!("quality {q}: {}", last_val(&t));
        save(&pipeline::adapted_path(&out, q), &t, &cfg, "adapt")?;
    }
    Ok(())
}

fn encode(c: &Common, input: &Path, ckpt: &Path, label: Option<&str>) -> Result<()> {
    let model = load_model(ckpt)?;
    let img = Image::load_png(input)?;
    let policy = c.blend.or(model.adaptation.as_ref().map(|a| a.meta.policy)).unwrap_or_default();
    let label = match label {
        None => None,
        Some(name) => {
            let domains = model.adaptation.as_ref().map(|a| a.meta.domains.as_slice()).unwrap_or_default();
            let l = domains.iter().position(|d| d == name).ok_or_else(|| {
                licda_core::Error::Config(format!("domain {name:?} is not one of the checkpoint's {domains:?}"))
            })?;
            Some(l)
        }
    };
    let compressed = model.compress(&img, policy, label)?;
    let out = c.out.clone().unwrap_or_else(|| input.with_extension("licb"));
    std::fs::write(&out, &compressed.bytes).with_context(|| format!("writing {}", out.display()))?;
    let len = std::fs::metadata(&out)?.len();
    let bpp = 8.0 * len as f64 / img.num_pixels() as f64;
    println!("{} bytes, {bpp:.6} bpp -> {}", len, out.display());
    Ok(())
}

fn decode(c: &Common, input: &Path, ckpt: &Path, reference: Option<&Path>, force_backbone: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let d = model.decompress(&bytes, DecodeLimits::default(), force_backbone)?;
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
    let out = c.out.clone().unwrap_or_else(|| input.with_extension("png"));
    d.image.save_png(&out)?;
    println!("{}x{} -> {}", d.image.width(), d.image.height(), out.display());
    if let Some(r) = reference {
        let reference = Image::load_png(r)?;
        println!("psnr {:.4} dB", psnr(&reference, &d.image)?);
    }
    Ok(())
}

fn eval(c: &Common, checkpoints: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let out = out_dir(c)?;
    let src = checkpoints.unwrap_or(&out).to_path_buf();
    cfg.write_resolved(&out)?;
    let ds = dataset(&cfg)?;
    let models = selected(&cfg, c)
        .into_iter()
        .map(|q| load_model(&pipeline::adapted_path(&src, q)))
        .collect::<Result<Vec<_>>>()?;
    let report = pipeline::evaluate(&cfg, &ds, &models)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("report.txt", report.to_text())?;
    write("report.json", report.to_json())?;
    write("records.jsonl", report.records_jsonl())?;
    if cfg.eval.plot {
        write("rd.svg", report.to_svg())?;
    }
    print!("{}", report.to_text());
    Ok(())
}
