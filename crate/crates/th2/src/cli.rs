//! Command-line front end. Every machine-readable line on stdout is JSON;
//! diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use th2_core::coords::{decode_box, digits_to_string, encode_box, encode_box_digits_with, BBox, CoordVocab};
use th2_core::crop::{plan_crop, CropConfig};
use th2_core::mix::Exhausted;
use th2_core::nn::ParamStore;
use th2_core::packing::{PackConfig, PackSample, PackedBatch, Packer};
use th2_core::planner::{partition, StageModel};
use th2_core::resampler::{EncoderConfig, Frontend, FrontendConfig, ResamplerConfig, RoutingTable};
use th2_core::spe::{axis_position, SpeTable};
use th2_core::{Image, SplitMix64};

use crate::error::io_err;
use crate::image_io::load_rgb;
use crate::pipeline::{DatasetSpec, Emitted, Pipeline, PipelineConfig, ResumeState};
use crate::shard::{build_shards, samples_from_dir, Member, ShardOptions};
use crate::source::{LocalDir, SharedSource};
use crate::stream::DatasetReader;
use crate::{selftest, Error, Result};

pub const DEFAULT_SEED: u64 = 20_240_613;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "th2", version, about = "High-resolution perception frontend toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Choose the sub-image grid for an image size.
    CropPlan(CropPlanArgs),
    /// Print scalable positional embeddings for a grid, one cell per line.
    Spe(SpeArgs),
    /// Run the visual-token compressor on an image.
    Compress(CompressArgs),
    /// Encode or decode bounding boxes as coordinate tokens.
    #[command(subcommand)]
    Coords(CoordsCommand),
    /// Build, stream, pack and resume sharded datasets.
    #[command(subcommand)]
    Shard(ShardCommand),
    /// Pack JSON-lines samples into fixed-length batches.
    Pack(PackArgs),
    /// Partition layers into pipeline stages.
    PpPlan(PpPlanArgs),
    /// Run the built-in invariant suite and print a pass/fail table.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct CropPlanArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Use the fine-tuning area cap (72 sub-images).
    #[arg(long)]
    finetune: bool,
    /// Omit the whole-image thumbnail.
    #[arg(long)]
    no_thumbnail: bool,
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for every random draw; overridden by TH2_SEED when not given.
    #[arg(long, env = "TH2_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SpeArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct CompressArgs {
    /// PNG or PPM file.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    image: Option<PathBuf>,
    /// Use a generated WIDTHxHEIGHT test pattern instead of a file.
    #[arg(long, value_parser = parse_size)]
    synthetic: Option<(usize, usize)>,
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    no_thumbnail: bool,
    /// Encoder depth; changing it requires --routing.
    #[arg(long, default_value_t = 27)]
    encoder_depth: usize,
    #[arg(long, default_value_t = 32)]
    encoder_width: usize,
    /// Encoder layer (0-based) for each decoder layer, deep to shallow.
    #[arg(long, value_delimiter = ',', default_values_t = [26usize, 22, 18, 14])]
    routing: Vec<usize>,
    /// Also print every output token as a JSON line.
    #[arg(long)]
    emit_tokens: bool,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Subcommand)]
enum CoordsCommand {
    /// Box → token ids (or the digit-string baseline).
    Encode(CoordsEncodeArgs),
    /// Token ids → box.
    Decode(CoordsDecodeArgs),
}

#[derive(Debug, Args)]
struct VocabArgs {
    /// Coordinate bins.
    #[arg(long, default_value_t = 1000)]
    bins: u32,
    /// Id of the open mark; the vocabulary follows contiguously.
    #[arg(long, default_value_t = 0)]
    base: u32,
}

#[derive(Debug, Args)]
struct CoordsEncodeArgs {
    /// x1,y1,x2,y2 normalized to [0, 1].
    #[arg(long = "box", value_delimiter = ',', num_args = 1, required = true)]
    bbox: Vec<f64>,
    /// Emit the 25-token digit string instead of coordinate tokens.
    #[arg(long)]
    digits: bool,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Debug, Args)]
struct CoordsDecodeArgs {
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    tokens: Vec<u32>,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnExhausted {
    Drop,
    Cycle,
}

impl From<OnExhausted> for Exhausted {
    fn from(v: OnExhausted) -> Self {
        match v {
            OnExhausted::Drop => Exhausted::Drop,
            OnExhausted::Cycle => Exhausted::Cycle,
        }
    }
}

#[derive(Debug, Subcommand)]
enum ShardCommand {
    /// Shuffle samples and write tar chunks plus a manifest.
    Build(ShardBuildArgs),
    /// Stream samples of one dataset.
    Stream(ShardStreamArgs),
    /// Mix datasets and pack the stream, optionally writing a snapshot.
    Pack(ShardPackArgs),
    /// Continue a mix/pack run from a snapshot.
    Resume(ShardResumeArgs),
}

#[derive(Debug, Args)]
struct ShardBuildArgs {
    /// Directory of files grouped into samples by file stem.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate this many random packing samples instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Samples per chunk.
    #[arg(long, default_value_t = 1000)]
    chunk_size: usize,
    #[arg(long, value_enum, default_value_t = OnExhausted::Drop)]
    on_exhausted: OnExhausted,
    /// Upper bound on generated token counts.
    #[arg(long, default_value_t = 1500)]
    max_sample_tokens: u32,
    /// Upper bound on generated tile counts.
    #[arg(long, default_value_t = 37)]
    max_sample_tiles: u32,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct ShardStreamArgs {
    #[arg(long)]
    shards: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Stream only this worker.
    #[arg(long)]
    worker: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct PackOutputArgs {
    /// Stop after this many emitted items.
    #[arg(long)]
    limit: Option<usize>,
    /// Write a resume snapshot after the last emitted item.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Print full token and segment arrays instead of summaries.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 4096)]
    context: usize,
    #[arg(long, default_value_t = 108)]
    max_tiles: u32,
    #[arg(long, default_value_t = 0)]
    pad_id: u32,
}

impl BudgetArgs {
    fn config(&self) -> PackConfig {
        PackConfig {
            context: self.context,
            max_tiles: self.max_tiles,
            pad_id: self.pad_id,
        }
    }
}

#[derive(Debug, Args)]
struct ShardPackArgs {
    /// Dataset directory; repeat to mix several.
    #[arg(long, required = true)]
    shards: Vec<PathBuf>,
    /// Mixing weight per dataset (defaults to equal weights).
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Emit mixed samples without packing.
    #[arg(long)]
    no_pack: bool,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: PackOutputArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct ShardResumeArgs {
    /// Snapshot written by `shard pack --snapshot` or a previous resume.
    #[arg(long)]
    state: PathBuf,
    #[command(flatten)]
    output: PackOutputArgs,
}

#[derive(Debug, Args)]
struct PackArgs {
    /// JSON-lines file of {"key", "tokens", "tiles"}; `-` reads stdin.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
struct PpPlanArgs {
    /// Cost of the vision encoder, pinned to stage 0.
    #[arg(long, default_value_t = 0.0)]
    vision_cost: f64,
    /// Per-layer costs of the language model.
    #[arg(long, value_delimiter = ',', required = true)]
    layer_costs: Vec<f64>,
    #[arg(long)]
    stages: usize,
    #[arg(long, default_value_t = 1)]
    micro_batches: usize,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[command(flatten)]
    seed: SeedArg,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

struct Out<'a> {
    out: &'a mut dyn Write,
}

impl Out<'_> {
    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_string(v)?;
        writeln!(self.out, "{s}").map_err(io_err("<stdout>"))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{text}");
            return code;
        }
    };
    let mut o = Out { out };
    match dispatch(cli.command, &mut o, err) {
        Ok(code) => code,
        // A closed downstream pipe ends output early; that is not a failure.
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command, o: &mut Out, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::CropPlan(a) => crop_plan(a, o),
        Command::Spe(a) => spe(a, o),
        Command::Compress(a) => compress(a, o),
        Command::Coords(CoordsCommand::Encode(a)) => coords_encode(a, o),
        Command::Coords(CoordsCommand::Decode(a)) => coords_decode(a, o),
        Command::Shard(ShardCommand::Build(a)) => shard_build(a, o),
        Command::Shard(ShardCommand::Stream(a)) => shard_stream(a, o),
        Command::Shard(ShardCommand::Pack(a)) => shard_pack(a, o, err),
        Command::Shard(ShardCommand::Resume(a)) => shard_resume(a, o, err),
        Command::Pack(a) => pack_file(a, o, err),
        Command::PpPlan(a) => pp_plan(a, o),
        Command::Selftest(a) => {
            let rows = selftest::run(a.seed.seed);
            let failed = rows.iter().filter(|r| !r.pass).count();
            for r in &rows {
                o.line(r)?;
            }
            o.line(&json!({ "passed": rows.len() - failed, "failed": failed }))?;
            Ok(if failed == 0 { EXIT_OK } else { EXIT_DATA })
        }
    }
}

fn crop_config(finetune: bool, no_thumbnail: bool) -> CropConfig {
    CropConfig {
        thumbnail: !no_thumbnail,
        ..if finetune {
            CropConfig::FINETUNE
        } else {
            CropConfig::PRETRAIN
        }
    }
}

fn crop_plan(a: CropPlanArgs, o: &mut Out) -> Result<i32> {
    let plan = plan_crop(a.width, a.height, &crop_config(a.finetune, a.no_thumbnail))?;
    o.line(&json!({
        "width": a.width,
        "height": a.height,
        "rows": plan.rows,
        "cols": plan.cols,
        "scaled_w": plan.scaled_w,
        "scaled_h": plan.scaled_h,
        "sub_images": plan.sub_images(),
        "thumbnail": plan.has_thumbnail,
        "tiles": plan.tile_count(),
    }))?;
    Ok(EXIT_OK)
}

fn spe(a: SpeArgs, o: &mut Out) -> Result<i32> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Input(String::from("grid must be at least 1x1")));
    }
    let mut rng = SplitMix64::new(a.seed.seed);
    let table = SpeTable::random(a.dim, a.heads, &mut rng)?;
    let dh = table.head_dim();
    for i in 0..a.rows {
        for j in 0..a.cols {
            let (tr, tc) = (axis_position(i, a.rows), axis_position(j, a.cols));
            let row = table.row_embedding(tr)?;
            let norms: Vec<f64> = row
                .chunks(dh)
                .map(|h| h.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            o.line(&json!({
                "row": i,
                "col": j,
                "t_row": tr,
                "t_col": tc,
                "row_head_norms": norms,
                "embedding": table.embed(tr, tc)?,
            }))?;
        }
    }
    Ok(EXIT_OK)
}

fn synthetic_image(w: usize, h: usize) -> Result<Image> {
    Ok(Image::from_fn(w, h, 3, |x, y, c| {
        let v = (x * (c + 3) + y * (7 - c)) % 256;
        v as f64 / 255.0
    })?)
}

fn compress(a: CompressArgs, o: &mut Out) -> Result<i32> {
    let img = match (&a.image, a.synthetic) {
        (Some(p), _) => load_rgb(p)?,
        (None, Some((w, h))) => synthetic_image(w, h)?,
        (None, None) => unreachable!("clap requires one of --image/--synthetic"),
    };
    let cfg = FrontendConfig {
        crop: crop_config(a.finetune, a.no_thumbnail),
        encoder: EncoderConfig {
            depth: a.encoder_depth,
            width: a.encoder_width,
            ..EncoderConfig::default()
        },
        resampler: ResamplerConfig::default(),
    };
    let mut store = ParamStore::new();
    let fe = Frontend::new(
        cfg,
        RoutingTable::new(a.routing)?,
        &mut store,
        &mut SplitMix64::new(a.seed.seed),
    )?;
    let (tokens, plan) = fe.compress(&store, &img)?;
    let grid = fe.encoder().grid();
    let patch_tokens = plan.tile_count() * grid * grid;
    let n = tokens.shape()[0];
    o.line(&json!({
        "width": img.width(),
        "height": img.height(),
        "rows": plan.rows,
        "cols": plan.cols,
        "thumbnail": plan.has_thumbnail,
        "tiles": plan.tile_count(),
        "patch_tokens": patch_tokens,
        "tokens": n,
        "dim": tokens.shape()[1],
        "compression": patch_tokens as f64 / n as f64,
    }))?;
    if a.emit_tokens {
        for i in 0..n {
            o.line(&json!({ "index": i, "token": tokens.row(i) }))?;
        }
    }
    Ok(EXIT_OK)
}

fn vocab(v: &VocabArgs) -> Result<CoordVocab> {
    Ok(CoordVocab::new(v.base, v.bins)?)
}

fn coords_encode(a: CoordsEncodeArgs, o: &mut Out) -> Result<i32> {
    let [x1, y1, x2, y2] = a.bbox[..] else {
        return Err(Error::Input(format!("--box needs 4 values, got {}", a.bbox.len())));
    };
    let b = BBox::new(x1, y1, x2, y2)?;
    let v = vocab(&a.vocab)?;
    if a.digits {
        let d = encode_box_digits_with(&b, v.bins);
        o.line(&json!({ "digits": digits_to_string(&d), "length": d.len() }))?;
    } else {
        let t = encode_box(&b, &v);
        o.line(&json!({ "tokens": t, "length": t.len() }))?;
    }
    Ok(EXIT_OK)
}

fn coords_decode(a: CoordsDecodeArgs, o: &mut Out) -> Result<i32> {
    let b = decode_box(&a.tokens, &vocab(&a.vocab)?)?;
    o.line(&json!({ "box": b.coords() }))?;
    Ok(EXIT_OK)
}

fn synthetic_samples(n: usize, max_tokens: u32, max_tiles: u32, rng: &mut SplitMix64) -> Result<Vec<Vec<Member>>> {
    (0..n)
        .map(|i| {
            let len = 1 + rng.below(u64::from(max_tokens.max(1))) as usize;
            let tiles = rng.below(u64::from(max_tiles) + 1);
            let tokens: Vec<u32> = (0..len).map(|_| 1 + rng.below(50_000) as u32).collect();
            let payload = serde_json::to_vec(&json!({ "tokens": tokens, "tiles": tiles }))?;
            Ok(vec![
                Member::new("json", payload),
                Member::new("txt", format!("synthetic sample {i}").into_bytes()),
            ])
        })
        .collect()
}

fn shard_build(a: ShardBuildArgs, o: &mut Out) -> Result<i32> {
    let samples = match (&a.input, a.synthetic) {
        (Some(dir), _) => samples_from_dir(dir)?,
        (None, Some(n)) => {
            let mut rng = SplitMix64::new(a.seed.seed).split();
            synthetic_samples(n, a.max_sample_tokens, a.max_sample_tiles, &mut rng)?
        }
        (None, None) => unreachable!("clap requires one of --input/--synthetic"),
    };
    let opts = ShardOptions {
        dataset: a.dataset,
        samples_per_chunk: a.chunk_size,
        seed: a.seed.seed,
        on_exhausted: a.on_exhausted.into(),
    };
    let manifest = build_shards(&samples, &opts, &a.out)?;
    o.line(&manifest)?;
    Ok(EXIT_OK)
}

fn sample_line(dataset: Option<&str>, key: &str, members: &[Member]) -> serde_json::Value {
    let members: Vec<_> = members
        .iter()
        .map(|m| json!({ "ext": m.ext, "bytes": m.data.len() }))
        .collect();
    match dataset {
        Some(d) => json!({ "kind": "sample", "dataset": d, "key": key, "members": members }),
        None => json!({ "kind": "sample", "key": key, "members": members }),
    }
}

fn shard_stream(a: ShardStreamArgs, o: &mut Out) -> Result<i32> {
    let source: SharedSource = std::sync::Arc::new(LocalDir::new(&a.shards));
    let mut reader = DatasetReader::open(source, a.workers)?;
    let limit = a.limit.unwrap_or(usize::MAX);
    let iter: Box<dyn Iterator<Item = Result<crate::shard::Sample>>> = match a.worker {
        Some(w) if w >= a.workers => {
            return Err(Error::Input(format!(
                "worker {w} out of range for {} workers",
                a.workers
            )));
        }
        Some(w) => Box::new(std::iter::from_fn(move || reader.worker_mut(w).next())),
        None => Box::new(reader),
    };
    for s in iter.take(limit) {
        let s = s?;
        o.line(&sample_line(None, &s.key, &s.members))?;
    }
    Ok(EXIT_OK)
}

fn batch_line(b: &PackedBatch, full: bool) -> serde_json::Value {
    if full {
        json!({ "kind": "batch", "batch": b })
    } else {
        json!({
            "kind": "batch",
            "keys": b.keys,
            "samples": b.samples(),
            "used": b.used(),
            "padding": b.padding(),
            "tiles": b.tiles,
        })
    }
}

fn drive(mut p: Pipeline, out: &PackOutputArgs, o: &mut Out, err: &mut dyn Write) -> Result<i32> {
    let limit = out.limit.unwrap_or(usize::MAX);
    let mut emitted = 0;
    let mut rejected = 0;
    while emitted < limit {
        match p.next() {
            None => break,
            Some(Ok(Emitted::Batch(b))) => o.line(&batch_line(&b, out.full))?,
            Some(Ok(Emitted::Sample(s))) => {
                if out.full {
                    o.line(&Emitted::Sample(s))?;
                } else {
                    o.line(&sample_line(Some(&s.dataset), &s.key, &s.members))?;
                }
            }
            Some(Err(Error::Core(e @ th2_core::Error::SampleTooLarge { .. }))) => {
                let _ = writeln!(err, "rejected: {e}");
                rejected += 1;
                continue;
            }
            Some(Err(e)) => return Err(e),
        }
        emitted += 1;
    }
    if let Some(path) = &out.snapshot {
        fs::write(path, p.snapshot().to_json()? + "\n").map_err(io_err(path))?;
    }
    Ok(if rejected > 0 { EXIT_DATA } else { EXIT_OK })
}

fn shard_pack(a: ShardPackArgs, o: &mut Out, err: &mut dyn Write) -> Result<i32> {
    let weights = if a.weights.is_empty() {
        vec![1.0; a.shards.len()]
    } else if a.weights.len() == a.shards.len() {
        a.weights
    } else {
        return Err(Error::Input(format!(
            "{} weights for {} datasets",
            a.weights.len(),
            a.shards.len()
        )));
    };
    let config = PipelineConfig {
        datasets: a
            .shards
            .into_iter()
            .zip(weights)
            .map(|(path, weight)| {
                // absolute paths keep snapshots valid from any working directory
                let path = fs::canonicalize(&path).map_err(io_err(&path))?;
                Ok(DatasetSpec { path, weight })
            })
            .collect::<Result<_>>()?,
        workers: a.workers,
        seed: a.seed.seed,
        pack: (!a.no_pack).then(|| a.budget.config()),
    };
    drive(Pipeline::open(config)?, &a.output, o, err)
}

fn shard_resume(a: ShardResumeArgs, o: &mut Out, err: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(&a.state).map_err(io_err(&a.state))?;
    let state = ResumeState::from_json(&text)?;
    drive(Pipeline::resume(&state)?, &a.output, o, err)
}

fn pack_file(a: PackArgs, o: &mut Out, err: &mut dyn Write) -> Result<i32> {
    let reader: Box<dyn BufRead> = if a.input.as_os_str() == "-" {
        Box::new(std::io::BufReader::new(std::io::stdin()))
    } else {
        let f = fs::File::open(&a.input).map_err(io_err(&a.input))?;
        Box::new(std::io::BufReader::new(f))
    };
    let mut packer = Packer::new(a.budget.config())?;
    let mut rejected = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&a.input))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PackSample =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", a.input.display(), n + 1)))?;
        match packer.push(s) {
            Ok(Some(b)) => o.line(&batch_line(&b, a.full))?,
            Ok(None) => {}
            Err(e @ th2_core::Error::SampleTooLarge { .. }) => {
                let _ = writeln!(err, "rejected: {e}");
                rejected += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(b) = packer.flush() {
        o.line(&batch_line(&b, a.full))?;
    }
    Ok(if rejected > 0 { EXIT_DATA } else { EXIT_OK })
}

fn pp_plan(a: PpPlanArgs, o: &mut Out) -> Result<i32> {
    let plan = partition(&StageModel {
        vision_cost: a.vision_cost,
        layer_costs: a.layer_costs,
        stages: a.stages,
        micro_batches: a.micro_batches,
    })?;
    o.line(&plan)?;
    Ok(EXIT_OK)
}
