use std::fs::OpenOptions;
use std::io::LineWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode as ProcessExit;

use clap::{Args, Parser, Subcommand};

use partfuse::config::RunConfig;
use partfuse::dataset::{read_part_masks, Corpus, CorpusSpec};
use partfuse::fusion::{PartSource, SwapSpec};
use partfuse::image::{read_image, read_mask, write_image, Image};
use partfuse::mask::{Part, PartMaskSet};
use partfuse::model::{ddim_config, Model};
use partfuse::pipeline;
use partfuse::train::Trainer;
use partfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "partfuse", version, about = "Facial part swapping with mask-fused, addition-injected latent diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic face corpus.
    GenData(GenData),
    /// Train encoder, fusion MLP and UNet jointly.
    Train(Train),
    /// Swap parts from source faces onto a target.
    Swap(Swap),
    /// Run a manifest of swaps and write a metric report.
    Eval(Eval),
    /// Write an evaluation manifest of held-out triples.
    EvalManifest(EvalManifest),
    /// Train and evaluate every injection mode under a shared budget.
    Ablate(Ablate),
    /// Swap with skin-region latent replacement from the inverted target.
    InvertFix(InvertFix),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in self.pairs()? {
            run.set(k, v)?;
        }
        Ok(run)
    }

    fn pairs(&self) -> Result<Vec<(&str, &str)>> {
        self.set
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))
            })
            .collect()
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; only `train.*` overrides apply.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss log (default `<out>.loss.tsv`, appended to on resume).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Inference {
    #[arg(long)]
    checkpoint: PathBuf,
    /// DDIM noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Injection weight.
    #[arg(long)]
    lambda: Option<f64>,
}

impl Inference {
    fn model(&self) -> Result<Model> {
        let mut model = Model::load(&self.checkpoint)?;
        if let Some(s) = self.seed {
            model.override_key("ddim.seed", &s.to_string())?;
        }
        if let Some(s) = self.steps {
            model.override_key("ddim.steps", &s.to_string())?;
        }
        if let Some(l) = self.lambda {
            model.override_key("inject.lambda", &l.to_string())?;
        }
        Ok(model)
    }
}

#[derive(Args)]
struct PartArgs {
    /// Target as `<image>:<mask_prefix>`; masks are `<prefix>_{eyes,nose,mouth}.pgm`.
    #[arg(long)]
    target: String,
    #[arg(long, value_name = "IMG:MASK_PREFIX")]
    eyes: Option<String>,
    #[arg(long, value_name = "IMG:MASK_PREFIX")]
    nose: Option<String>,
    #[arg(long, value_name = "IMG:MASK_PREFIX")]
    mouth: Option<String>,
}

fn read_view(arg: &str) -> Result<(Image, PartMaskSet)> {
    let (img, prefix) = arg
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("expected <image>:<mask_prefix>, got {arg:?}")))?;
    let image = read_image(Path::new(img))?;
    let masks = read_part_masks(Path::new(prefix))?;
    image.check_mask(masks.get(Part::Eyes)).map_err(|e| Error::Data(format!("{arg}: {e}")))?;
    Ok((image, masks))
}

impl PartArgs {
    fn load(&self) -> Result<(Image, PartMaskSet, SwapSpec)> {
        let (image, masks) = read_view(&self.target)?;
        let mut spec = SwapSpec::none();
        for (part, arg) in [(Part::Eyes, &self.eyes), (Part::Nose, &self.nose), (Part::Mouth, &self.mouth)] {
            if let Some(a) = arg {
                let (img, m) = read_view(a)?;
                spec.set(part, PartSource { image: img, mask: m.get(part).clone() })?;
            }
        }
        Ok((image, masks, spec))
    }
}

#[derive(Args)]
struct Swap {
    #[command(flatten)]
    inference: Inference,
    #[command(flatten)]
    parts: PartArgs,
    /// Output image (`.png` for PNG, PPM otherwise).
    #[arg(long)]
    out: PathBuf,
    /// Comparison grid (default `<out stem>.grid.<ext>`).
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    inference: Inference,
    /// Manifest written by `eval-manifest`.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the manifest prefixes are relative to.
    #[arg(long)]
    data: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalManifest {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parts to swap, comma separated.
    #[arg(long, default_value = "eyes,nose,mouth")]
    parts: String,
    /// Number of triples (default `eval.triples`).
    #[arg(long)]
    triples: Option<usize>,
    /// Triple selection seed (default `eval.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertFix {
    #[command(flatten)]
    inference: Inference,
    #[command(flatten)]
    parts: PartArgs,
    /// Skin mask PGM (default: the target's remaining region).
    #[arg(long)]
    skin: Option<PathBuf>,
    /// Leading steps with latent replacement (default `fix.threshold`).
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{suffix}"),
    };
    path.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn seeded(mut run: RunConfig, key: &str, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(s) = seed {
        run.set(key, &s.to_string())?;
    }
    Ok(run)
}

fn gen_data(a: GenData) -> Result<()> {
    let run = seeded(a.config.load()?, "seed", a.seed)?;
    let spec = CorpusSpec {
        seed: run.u64("seed")?,
        identities: a.identities.map_or_else(|| run.usize("data.identities"), Ok)?,
        views: a.views.map_or_else(|| run.usize("data.views"), Ok)?,
        size: a.size.map_or_else(|| run.usize("data.size"), Ok)?,
        ..CorpusSpec::default()
    };
    let corpus = Corpus::generate(&spec)?;
    corpus.write(&a.out, &spec)?;
    eprintln!("wrote {} views to {}", corpus.samples.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let corpus = Corpus::load(&a.data)?;
    let mut model = match &a.resume {
        Some(path) => {
            let mut m = Model::load(path)?;
            for (k, v) in a.config.pairs()? {
                m.override_key(k, v)?;
            }
            m
        }
        None => Model::new(&seeded(a.config.load()?, "seed", a.seed)?)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let name = a.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{name}.loss.tsv"))
    });
    let file = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let start = model.store.step();
    let losses = Trainer::new(&mut model, &corpus)?.run(Some(&a.out), &mut LineWriter::new(file))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("steps {start}..{}: loss {first:.4} -> {last:.4}", model.store.step());
    }
    Ok(())
}

fn swap(a: Swap) -> Result<()> {
    let model = a.inference.model()?;
    let (target, masks, spec) = a.parts.load()?;
    let out = pipeline::swap(&model, &target, &masks, &spec, &ddim_config(&model.run)?)?;
    write_image(&a.out, &out.image)?;
    write_image(&a.grid.unwrap_or_else(|| with_suffix(&a.out, "grid")), &out.grid)
}

fn eval(a: Eval) -> Result<()> {
    let model = a.inference.model()?;
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let entries = pipeline::parse_eval_manifest(&text)?;
    let cases = pipeline::load_cases(&a.data, &entries)?;
    let (report, _) = pipeline::evaluate(&model, &cases, &ddim_config(&model.run)?)?;
    write_text(&a.out, &report.render())
}

fn eval_manifest(a: EvalManifest) -> Result<()> {
    let mut run = seeded(a.config.load()?, "eval.seed", a.seed)?;
    if let Some(n) = a.triples {
        run.set("eval.triples", &n.to_string())?;
    }
    let parts = a
        .parts
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim() {
            "eyes" => Ok(Part::Eyes),
            "nose" => Ok(Part::Nose),
            "mouth" => Ok(Part::Mouth),
            other => Err(Error::Config(format!("unknown part {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::load(&a.data)?;
    let triples = pipeline::held_out_triples(&run, &corpus, run.usize("eval.triples")?)?;
    write_text(&a.out, &pipeline::render_eval_manifest(&pipeline::triples_manifest(&triples, &parts)))
}

fn ablate(a: Ablate) -> Result<()> {
    let run = seeded(a.config.load()?, "seed", a.seed)?;
    let corpus = Corpus::load(&a.data)?;
    let rows = pipeline::ablate(&run, &corpus, &mut |s| eprintln!("{s}"))?;
    write_text(&a.out, &pipeline::render_ablation(&rows))
}

fn invert_fix(a: InvertFix) -> Result<()> {
    let model = a.inference.model()?;
    let (target, masks, spec) = a.parts.load()?;
    let skin = match &a.skin {
        Some(p) => read_mask(p)?,
        None => masks.get(Part::Remain).clone(),
    };
    let threshold = a.threshold.map_or_else(|| model.run.usize("fix.threshold"), Ok)?;
    let out = pipeline::invert_fix(&model, &target, &masks, &spec, &skin, threshold, &ddim_config(&model.run)?)?;
    write_image(&a.out, &out)
}

fn main() -> ProcessExit {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Swap(a) => swap(a),
        Command::Eval(a) => eval(a),
        Command::EvalManifest(a) => eval_manifest(a),
        Command::Ablate(a) => ablate(a),
        Command::InvertFix(a) => invert_fix(a),
    };
    match result {
        Ok(()) => ProcessExit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ProcessExit::from(e.exit_code() as u8)
        }
    }
}
