//! Command-line pipeline: synthesis, retrieval, generator training,
//! generation, evaluation and a demo chat loop.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, bad config,
//! refusing to overwrite), 2 on data errors.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assemble_quadruples, generate_synthetic_world, load_dialogs, read_jsonl, write_jsonl, Dialog, GroundTruth,
    ImageRecord, Pairing, Quadruple, Split, Tokenizer,
};
use crate::detector::{load_regions, save_tags, synthetic_detect, write_regions, RegionSet};
use crate::generator::{GeneratorModel, TrainReport};
use crate::index::VectorIndex;
use crate::metrics::{evaluate, EvalReport};
use crate::retriever::{build_query, train_retriever, QueryMode, Retriever, TrainingPair};

pub use config::{DecodeMode, DecodeSettings, EvalSettings, Paths, PipelineConfig, SynthSettings};

#[derive(Debug, Parser)]
#[command(name = "groundchat", version, about = "Image-grounded dialog generation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output path (a directory for `synth`).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Artifact directory (`paths.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub dir: Option<String>,
    /// Override any config key, e.g. `--set generator.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic world: dialogs, regions, tags, ground truth, vocabulary.
    Synth {
        /// Regions per image.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the two-tower retriever on the ground-truth training pairs.
    TrainRetriever,
    /// Encode every image into an inner-product index.
    BuildIndex,
    /// Pair each dialog of a split with its best-scoring image.
    Retrieve {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Store this many ranked candidates per dialog.
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        /// Log every query string to `paths.audit`.
        #[arg(long)]
        audit: bool,
    },
    /// Train the response generator on retrieved training quadruples.
    TrainGenerator {
        /// Start from the parameters of a compatible checkpoint.
        #[arg(long, value_name = "PATH")]
        init_from: Option<PathBuf>,
    },
    /// Generate a reply for every dialog of a split.
    Generate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        decode: Option<DecodeMode>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score the generator on a split and write the report as JSON.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dump one attention map over regions and concepts.
    ExportAttention {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        dialog_id: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Interactive demo: type an utterance, `/quit` exits.
    Chat,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I, input: &mut dyn BufRead, output: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, input, output) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Data(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

/// Merges defaults, the config file and flags.
pub fn resolve_config(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            PipelineConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(CliError::Usage)?;
    }
    if let Some(d) = &common.dir {
        cfg.paths.dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.sync_seeds();
    Ok(cfg)
}

pub fn run(cli: Cli, input: &mut dyn BufRead, output: &mut dyn Write) -> CliResult {
    let mut cfg = resolve_config(&cli.common)?;
    let ctx = Ctx { force: cli.common.force, out: cli.common.out.clone() };
    match cli.command {
        Command::Synth { k } => {
            if let Some(k) = k {
                cfg.synth.k = k;
            }
            if let Some(d) = &ctx.out {
                cfg.paths.dir = d.to_string_lossy().into_owned();
            }
            cmd_synth(&cfg, ctx.force)
        }
        Command::TrainRetriever => cmd_train_retriever(&cfg, &ctx),
        Command::BuildIndex => cmd_build_index(&cfg, &ctx),
        Command::Retrieve { split, top_k, audit } => cmd_retrieve(&cfg, &ctx, split.into(), top_k, audit),
        Command::TrainGenerator { init_from } => cmd_train_generator(&cfg, &ctx, init_from.as_deref()),
        Command::Generate { split, decode, temperature, top_k } => {
            if let Some(m) = decode {
                cfg.decode.mode = m;
            }
            if let Some(t) = temperature {
                cfg.decode.temperature = t;
            }
            if let Some(k) = top_k {
                cfg.decode.top_k = k;
            }
            cmd_generate(&cfg, &ctx, split.into())
        }
        Command::Evaluate { split } => cmd_evaluate(&cfg, &ctx, split.into(), output),
        Command::ExportAttention { split, dialog_id, layer, head } => {
            cmd_export_attention(&cfg, &ctx, split.into(), &dialog_id, layer, head)
        }
        Command::Chat => cmd_chat(&cfg, input, output),
    }
}

struct Ctx {
    force: bool,
    out: Option<PathBuf>,
}

impl Ctx {
    /// `--out` if given, else the configured artifact path; refuses to
    /// overwrite without `--force`.
    fn output(&self, default: PathBuf) -> CliResult<PathBuf> {
        let p = self.out.clone().unwrap_or(default);
        refuse_overwrite(&p, self.force)?;
        Ok(p)
    }
}

fn refuse_overwrite(p: &Path, force: bool) -> CliResult {
    if p.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
    }
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn require(p: &Path, what: &str) -> anyhow::Result<()> {
    if !p.exists() {
        bail!("missing {what}: {}", p.display());
    }
    Ok(())
}

fn split_dialogs_path(cfg: &PipelineConfig, split: Split) -> PathBuf {
    match split {
        Split::Train => cfg.path(&cfg.paths.train_dialogs),
        Split::Test => cfg.path(&cfg.paths.test_dialogs),
    }
}

fn split_pairs_path(cfg: &PipelineConfig, split: Split) -> PathBuf {
    match split {
        Split::Train => cfg.path(&cfg.paths.train_pairs),
        Split::Test => cfg.path(&cfg.paths.test_pairs),
    }
}

fn load_vocab(cfg: &PipelineConfig) -> anyhow::Result<Tokenizer> {
    let p = cfg.path(&cfg.paths.vocab);
    require(&p, "vocabulary")?;
    Ok(Tokenizer::load(&p)?)
}

fn load_region_map(cfg: &PipelineConfig) -> anyhow::Result<BTreeMap<String, RegionSet>> {
    let p = cfg.path(&cfg.paths.regions);
    require(&p, "regions")?;
    Ok(load_regions(&p)?)
}

fn load_split_dialogs(cfg: &PipelineConfig, split: Split) -> anyhow::Result<Vec<Dialog>> {
    let p = split_dialogs_path(cfg, split);
    require(&p, "dialogs")?;
    Ok(load_dialogs(&p)?)
}

fn load_generator(cfg: &PipelineConfig) -> anyhow::Result<GeneratorModel> {
    let p = cfg.path(&cfg.paths.generator);
    require(&p, "generator checkpoint")?;
    GeneratorModel::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_split_quadruples(cfg: &PipelineConfig, split: Split, tok: &Tokenizer) -> anyhow::Result<Vec<Quadruple>> {
    let dialogs = load_split_dialogs(cfg, split)?;
    let regions = load_region_map(cfg)?;
    let pairs_path = split_pairs_path(cfg, split);
    require(&pairs_path, "retrieved pairs")?;
    let pairs: Vec<Pairing> = read_jsonl(&pairs_path)?;
    let (quads, unk) = assemble_quadruples(&dialogs, &regions, &pairs, tok)?;
    if unk > 0 {
        log::warn!("{unk} concept tags are out of vocabulary and map to [UNK]");
    }
    Ok(quads)
}

fn cmd_synth(cfg: &PipelineConfig, force: bool) -> CliResult {
    let p = &cfg.paths;
    let outputs = [
        &p.dialogs,
        &p.train_dialogs,
        &p.test_dialogs,
        &p.regions,
        &p.tags,
        &p.ground_truth,
        &p.vocab,
    ]
    .map(|n| cfg.path(n));
    for o in &outputs {
        refuse_overwrite(o, force)?;
    }
    let world = generate_synthetic_world(&cfg.synth.world(cfg.seed))?;
    let regions: Vec<RegionSet> = world
        .images
        .iter()
        .map(|img| synthetic_detect(img, &world, cfg.synth.k, cfg.synth.region_noise, cfg.seed))
        .collect::<crate::Result<_>>()?;
    let train = world.dialogs_in(Split::Train);
    let tok = Tokenizer::build(&train, &world.concepts, 1)?;

    write_jsonl(&outputs[0], &world.dialogs)?;
    write_jsonl(&outputs[1], &train)?;
    write_jsonl(&outputs[2], &world.dialogs_in(Split::Test))?;
    write_regions(&outputs[3], &regions)?;
    save_tags(&outputs[4], &world.concepts)?;
    write_jsonl(&outputs[5], &world.ground_truth)?;
    tok.save(&outputs[6])?;
    log::info!(
        "synth: {} dialogs ({} train), {} images x {} regions, vocabulary {} -> {}",
        world.dialogs.len(),
        train.len(),
        regions.len(),
        cfg.synth.k,
        tok.len(),
        cfg.paths.dir
    );
    Ok(())
}

fn image_records(regions: &BTreeMap<String, RegionSet>) -> Vec<ImageRecord> {
    regions.values().cloned().map(ImageRecord::from_regions).collect()
}

fn cmd_train_retriever(cfg: &PipelineConfig, ctx: &Ctx) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.retriever))?;
    let tok = load_vocab(cfg)?;
    let dialogs = load_split_dialogs(cfg, Split::Train)?;
    let regions = load_region_map(cfg)?;
    let gt_path = cfg.path(&cfg.paths.ground_truth);
    require(&gt_path, "ground truth")?;
    let gt: Vec<GroundTruth> = read_jsonl(&gt_path)?;
    let by_id: BTreeMap<&str, &Dialog> = dialogs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut pairs = Vec::new();
    for g in gt.iter().filter(|g| g.split == Split::Train) {
        let (Some(d), Some(r)) = (by_id.get(g.dialog_id.as_str()), regions.get(&g.image_id)) else {
            continue;
        };
        pairs.push(TrainingPair {
            query: build_query(d, QueryMode::Train),
            image: ImageRecord::from_regions(r.clone()),
        });
    }
    let mut tower = cfg.retriever.clone();
    if let Some(r) = regions.values().next() {
        tower.image_encoder_dim = r.d_obj();
    }
    let (model, losses) = train_retriever(&pairs, tok, tower)?;
    log::info!(
        "train-retriever: {} pairs, loss {:.4} -> {:.4}",
        pairs.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    model.save(&out)?;
    Ok(())
}

fn load_retriever(cfg: &PipelineConfig) -> anyhow::Result<Retriever> {
    let p = cfg.path(&cfg.paths.retriever);
    require(&p, "retriever checkpoint")?;
    Retriever::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_index(cfg: &PipelineConfig) -> anyhow::Result<VectorIndex> {
    let p = cfg.path(&cfg.paths.index);
    require(&p, "index")?;
    VectorIndex::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn cmd_build_index(cfg: &PipelineConfig, ctx: &Ctx) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.index))?;
    let model = load_retriever(cfg)?;
    let images = image_records(&load_region_map(cfg)?);
    let mut index = VectorIndex::new(model.config.output_dim());
    for img in &images {
        index.add(&img.id, &model.encode_image(img)?)?;
    }
    index.freeze();
    index.save(&out)?;
    log::info!("build-index: {} images", index.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AuditLine {
    dialog_id: String,
    split: Split,
    query: String,
}

fn cmd_retrieve(cfg: &PipelineConfig, ctx: &Ctx, split: Split, top_k: usize, audit: bool) -> CliResult {
    if top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let out = ctx.output(split_pairs_path(cfg, split))?;
    let audit_path = cfg.path(&cfg.paths.audit);
    if audit {
        refuse_overwrite(&audit_path, ctx.force)?;
    }
    let model = load_retriever(cfg)?;
    let index = load_index(cfg)?;
    let dialogs = load_split_dialogs(cfg, split)?;
    let mode = match split {
        Split::Train => QueryMode::Train,
        Split::Test => QueryMode::Infer,
    };
    let mut pairs = Vec::with_capacity(dialogs.len());
    let mut log_lines = Vec::new();
    for d in &dialogs {
        let query = build_query(d, mode);
        let hits = index.search_top_k(&model.encode_text(&query)?, top_k)?;
        let best = hits.first().ok_or_else(|| anyhow!("index returned no candidates"))?;
        let mut p = Pairing::new(&d.id, &best.id);
        p.score = Some(best.score);
        if top_k > 1 {
            p.alternatives = hits.iter().map(|h| (h.id.clone(), h.score)).collect();
        }
        pairs.push(p);
        log_lines.push(AuditLine { dialog_id: d.id.clone(), split, query });
    }
    write_jsonl(&out, &pairs)?;
    if audit {
        write_jsonl(&audit_path, &log_lines)?;
    }
    let gt_path = cfg.path(&cfg.paths.ground_truth);
    if gt_path.exists() && !pairs.is_empty() {
        let gt: Vec<GroundTruth> = read_jsonl(&gt_path)?;
        let truth: BTreeMap<&str, &str> = gt.iter().map(|g| (g.dialog_id.as_str(), g.image_id.as_str())).collect();
        let hits = pairs.iter().filter(|p| truth.get(p.dialog_id.as_str()) == Some(&p.image_id.as_str())).count();
        log::info!("retrieve: {hits}/{} pairings match the ground truth", pairs.len());
    }
    Ok(())
}

fn cmd_train_generator(cfg: &PipelineConfig, ctx: &Ctx, init_from: Option<&Path>) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.generator))?;
    let tok = load_vocab(cfg)?;
    let quads = load_split_quadruples(cfg, Split::Train, &tok)?;
    let mut gcfg = cfg.generator.clone();
    if let Some(q) = quads.first() {
        gcfg.d_obj = q.regions.d_obj();
    }
    let mut model = GeneratorModel::new(gcfg, tok)?;
    if let Some(p) = init_from {
        require(p, "initial checkpoint")?;
        model.init_from(p)?;
    }
    let report: TrainReport = model.train(&quads, |epoch, m| {
        log::info!("train-generator: epoch {epoch} done");
        m.save(&out)
    })?;
    log::info!(
        "train-generator: {} quadruples, {} steps, loss {:.4} -> {:.4}",
        quads.len(),
        report.steps,
        report.step_losses.first().copied().unwrap_or(f64::NAN),
        report.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    model.save(&out)?;
    Ok(())
}

/// Line of the generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub dialog_id: String,
    pub image_id: String,
    pub response: String,
}

/// Shared reply path of `generate` and `chat`.
pub fn reply(model: &GeneratorModel, q: &Quadruple, decode: &DecodeSettings, seed: u64) -> crate::Result<String> {
    let max_len = if decode.max_len == 0 { model.config.max_response_len } else { decode.max_len };
    let g = model.generate(q, decode.decode(), max_len, seed)?;
    Ok(model.tokenizer.decode(&g.tokens))
}

fn cmd_generate(cfg: &PipelineConfig, ctx: &Ctx, split: Split) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.generations))?;
    let model = load_generator(cfg)?;
    let quads = load_split_quadruples(cfg, split, &model.tokenizer)?;
    let lines = quads
        .iter()
        .enumerate()
        .map(|(i, q)| {
            Ok(GenerationLine {
                dialog_id: q.dialog_id.clone(),
                image_id: q.image_id.clone(),
                response: reply(&model, q, &cfg.decode, cfg.seed.wrapping_add(i as u64))?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    write_jsonl(&out, &lines)?;
    log::info!("generate: {} replies -> {}", lines.len(), out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &PipelineConfig, ctx: &Ctx, split: Split, output: &mut dyn Write) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.report))?;
    let model = load_generator(cfg)?;
    let quads = load_split_quadruples(cfg, split, &model.tokenizer)?;
    let report: EvalReport = evaluate(&model, &quads, &cfg.eval_options())?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(&out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    write!(output, "{}{json}\n", report.to_pretty()).context("writing to stdout")?;
    Ok(())
}

fn cmd_export_attention(cfg: &PipelineConfig, ctx: &Ctx, split: Split, dialog_id: &str, layer: usize, head: usize) -> CliResult {
    let out = ctx.output(cfg.path(&cfg.paths.attention))?;
    let model = load_generator(cfg)?;
    if layer >= model.config.layers || head >= model.config.heads {
        return Err(CliError::Usage(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            model.config.layers, model.config.heads
        )));
    }
    let quads = load_split_quadruples(cfg, split, &model.tokenizer)?;
    let q = quads
        .iter()
        .find(|q| q.dialog_id == dialog_id)
        .ok_or_else(|| anyhow!("dialog {dialog_id} not found in the {split:?} pairs"))?;
    let export = model.export_attention(q, layer, head)?;
    let json = serde_json::to_string_pretty(&export).context("serializing attention")?;
    fs::write(&out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Utterances kept in the rolling chat context.
const CHAT_WINDOW: usize = 4;

fn cmd_chat(cfg: &PipelineConfig, input: &mut dyn BufRead, output: &mut dyn Write) -> CliResult {
    let retriever = load_retriever(cfg)?;
    let index = load_index(cfg)?;
    let regions = load_region_map(cfg)?;
    let model = load_generator(cfg)?;
    let mut context: Vec<String> = Vec::new();
    let mut turn = 0u64;
    let io = |e: std::io::Error| CliError::Data(anyhow!(e).context("chat i/o"));
    loop {
        write!(output, "> ").map_err(io)?;
        output.flush().map_err(io)?;
        let mut line = String::new();
        if input.read_line(&mut line).map_err(io)? == 0 {
            return Ok(());
        }
        let line = line.trim();
        if line == "/quit" {
            return Ok(());
        }
        if line.is_empty() {
            continue;
        }
        context.push(line.to_string());
        let start = context.len().saturating_sub(CHAT_WINDOW);
        context.drain(..start);
        let d = Dialog { id: format!("chat-{turn}"), context: context.clone(), response: String::new() };
        let hits = index.search_top_k(&retriever.encode_text(&build_query(&d, QueryMode::Infer))?, 1)?;
        let image = &hits.first().ok_or_else(|| anyhow!("index returned no candidates"))?.id;
        let r = regions.get(image).ok_or_else(|| crate::Error::UnknownImage(image.clone()))?;
        writeln!(output, "image: {image}").map_err(io)?;
        writeln!(output, "concepts: {}", r.concepts.join(" ")).map_err(io)?;
        let (q, _) = Quadruple::for_context(&d.id, &d.context, r, &model.tokenizer)?;
        let text = reply(&model, &q, &cfg.decode, cfg.seed.wrapping_add(turn))?;
        writeln!(output, "bot: {text}").map_err(io)?;
        if !text.is_empty() {
            context.push(text);
        }
        turn += 1;
    }
}
