use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use latmap_core::gradcheck::{self, GradcheckConfig};
use latmap_core::ingest::back_project;
use latmap_core::online::{replay, write_report_csv};
use latmap_core::store::dataset::{
    read_dataset, read_stream, write_dataset, write_stream, Dataset, DatasetFrame, Split, StreamEntry, StreamManifest,
};
use latmap_core::store::export::export_pca_ply;
use latmap_core::store::synth::{Relocation, SynthScene, SynthSpec};
use latmap_core::store::{
    load_aggregator, load_decoder, save_aggregator, save_decoder, save_token, Precision, TokenFormat, FORMAT_VERSION,
};
use latmap_core::token::map_token;
use latmap_core::trainer::{fit_scene, mean_cosine, pretrain_decoder, SceneData};
use latmap_core::{
    AggregatorWeights, Bounds, Error, GridConfig, LatentGrid, LatentMap, Mlp, OnlineMapper, PosEncConfig, Sample,
};
use serde::Serialize;

use crate::config::CliConfig;
use crate::{
    BuildArgs, Cli, Command, ExportArgs, GradcheckArgs, PrecisionArg, PretrainArgs, QueryArgs, ReplayArgs, SynthArgs,
    TokenArgs, TokenFormatArg,
};

/// Why a command stopped; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Ctx {
    cfg: CliConfig,
    seed: u64,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    init_threads()?;
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.train.seed),
        cfg,
        verbose: cli.verbose,
    };
    for path in cli.command.inputs() {
        require(path)?;
    }
    match cli.command {
        Command::Build(a) => build(&ctx, a),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Replay(a) => replay_cmd(&ctx, a),
        Command::Query(a) => query(a),
        Command::Token(a) => token(&ctx, a),
        Command::Export(a) => export(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Gradcheck(a) => gradcheck_cmd(&ctx, a),
    }
}

fn init_threads() -> Outcome {
    let Ok(raw) = std::env::var("LMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(Failure::Usage(format!(
                "LMAP_THREADS must be a positive integer, got {raw:?}"
            )))
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))
}

/// Fails with the path in the message instead of a bare OS error.
fn require(path: &Path) -> Outcome {
    if path.exists() {
        return Ok(());
    }
    let msg = format!("{}: no such file or directory", path.display());
    Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg)).into())
}

fn precision(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    }
}

/// Back-projects frames and keeps the samples inside `bounds`.
fn samples<'a>(frames: impl IntoIterator<Item = &'a DatasetFrame>, bounds: &Bounds) -> Result<Vec<Sample>, Failure> {
    let mut out = Vec::new();
    for f in frames {
        let (mut batch, _) = back_project(&f.frame, &f.id)?;
        batch.retain_in_bounds(bounds);
        out.extend(batch.samples);
    }
    Ok(out)
}

fn grid_config_for(ctx: &Ctx, ds: &Dataset) -> GridConfig {
    let mut grid = ctx.cfg.grid.clone();
    if let Some(b) = ds.bounds {
        grid.bounds = b;
    }
    grid
}

fn fresh_decoder(ctx: &Ctx, grid: &GridConfig, out_dim: usize) -> Result<Mlp, Failure> {
    Ok(Mlp::init(
        ctx.seed,
        &ctx.cfg.decoder_hidden,
        grid.encoded_dim(),
        out_dim,
    )?)
}

fn check_decoder(dec: &Mlp, grid: &GridConfig, out_dim: usize) -> Outcome {
    if dec.in_dim() != grid.encoded_dim() {
        return Err(Error::DimensionMismatch {
            what: "decoder input",
            expected: grid.encoded_dim(),
            got: dec.in_dim(),
        }
        .into());
    }
    if dec.out_dim() != out_dim {
        return Err(Error::DimensionMismatch {
            what: "decoder output",
            expected: out_dim,
            got: dec.out_dim(),
        }
        .into());
    }
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Outcome {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{},{l:.9e}", i + 1)?;
    }
    out.flush()?;
    Ok(())
}

fn build(ctx: &Ctx, a: BuildArgs) -> Outcome {
    let ds = read_dataset(&a.dataset)?;
    let grid_cfg = grid_config_for(ctx, &ds);
    let train = samples(ds.split(Split::Train), &grid_cfg.bounds)?;
    let heldout = samples(ds.split(Split::Heldout), &grid_cfg.bounds)?;
    let Some(first) = train.first() else {
        return Err(Error::EmptyBatch.into());
    };
    let k = first.y.len();
    let mut dec = match &a.decoder {
        Some(p) => load_decoder(p)?,
        None => fresh_decoder(ctx, &grid_cfg, k)?,
    };
    check_decoder(&dec, &grid_cfg, k)?;

    let mut train_cfg = ctx.cfg.train.clone();
    if let Some(steps) = a.steps {
        train_cfg.max_steps = steps;
        train_cfg.epochs = None;
    }
    train_cfg.freeze_decoder |= a.freeze_decoder;
    ctx.log(format!(
        "build: {} train samples, {} held-out, {} steps",
        train.len(),
        heldout.len(),
        train_cfg.steps_for(train.len())
    ));

    let started = Instant::now();
    let mut grid = LatentGrid::new(grid_cfg)?;
    let history = fit_scene(&mut grid, &mut dec, &train, &train_cfg)?;
    ctx.log(format!("build: fit took {:.1} s", started.elapsed().as_secs_f64()));

    let train_cos = mean_cosine(&grid, &dec, &train)?;
    let mut line = format!("steps={} train_cosine={train_cos:.6}", history.len());
    if !heldout.is_empty() {
        line += &format!(" heldout_cosine={:.6}", mean_cosine(&grid, &dec, &heldout)?);
    }
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &history)?;
    }
    LatentMap::new(grid, dec)?.save(&a.out, precision(a.precision))?;
    println!("{line}");
    Ok(())
}

fn pretrain(ctx: &Ctx, a: PretrainArgs) -> Outcome {
    let mut scenes = Vec::with_capacity(a.scenes.len());
    for path in &a.scenes {
        let ds = read_dataset(path)?;
        let grid = grid_config_for(ctx, &ds);
        let samples = samples(ds.split(Split::Train), &grid.bounds)?;
        ctx.log(format!("pretrain: {} has {} samples", path.display(), samples.len()));
        scenes.push(SceneData { grid, samples });
    }
    let k = scenes
        .iter()
        .find_map(|s| s.samples.first())
        .map(|s| s.y.len())
        .ok_or(Error::EmptyBatch)?;
    let dec = fresh_decoder(ctx, &scenes[0].grid, k)?;
    if let Some(bad) = scenes.iter().find(|s| s.grid.encoded_dim() != dec.in_dim()) {
        return Err(Error::DimensionMismatch {
            what: "scene grid encoding",
            expected: dec.in_dim(),
            got: bad.grid.encoded_dim(),
        }
        .into());
    }

    let mut cfg = ctx.cfg.train.clone();
    if let Some(steps) = a.steps {
        cfg.max_steps = steps;
        cfg.epochs = None;
    }
    let pre = pretrain_decoder(&scenes, dec, &cfg)?;
    let mut line = format!("steps={}", pre.history.len());
    for (i, (scene, grid)) in scenes.iter().zip(&pre.grids).enumerate() {
        line += &format!(
            " scene{i}_cosine={:.6}",
            mean_cosine(grid, &pre.decoder, &scene.samples)?
        );
    }
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &pre.history)?;
    }
    save_decoder(&pre.decoder, &a.out, precision(a.precision))?;
    println!("{line}");
    Ok(())
}

fn replay_cmd(ctx: &Ctx, a: ReplayArgs) -> Outcome {
    let bytes = fs::read(&a.map)?;
    let map = LatentMap::from_bytes(&bytes)?;
    // the precision tag follows the magic and version
    let stored = if bytes[8] == Precision::F64.tag() {
        Precision::F64
    } else {
        Precision::F32
    };
    let mut online = ctx.cfg.online.clone();
    online.t_update = a.t_update.unwrap_or(online.t_update);
    online.k_update = a.k_update.unwrap_or(online.k_update);
    online.eta = a.eta.unwrap_or(online.eta);

    let stream = read_stream(&a.stream)?;
    ctx.log(format!("replay: {} steps", stream.len()));
    let mut mapper = OnlineMapper::new(map.grid, map.decoder, online)?;
    let reports = replay(&mut mapper, stream.into_iter().map(Ok))?;
    let updates = reports.iter().filter(|r| r.updated).count();
    let (grid, dec, _) = mapper.into_parts();
    if let Some(p) = &a.report {
        let mut out = BufWriter::new(File::create(p)?);
        write_report_csv(&mut out, &reports)?;
        out.flush()?;
    }
    LatentMap::new(grid, dec)?.save(&a.out, a.precision.map(precision).unwrap_or(stored))?;
    println!("steps={} updates={updates}", reports.len());
    Ok(())
}

/// Parses whitespace-separated rows of floats, one row per non-blank line.
fn read_rows(path: &Path, width: Option<usize>) -> Result<Vec<Vec<f64>>, Failure> {
    let text = fs::read_to_string(path)?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse(i + 1, format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(w) = width {
            if row.len() != w {
                return Err(parse(i + 1, format!("expected {w} values, found {}", row.len())).into());
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse(i + 1, "non-finite value".into()).into());
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct QueryPoint {
    x: [f64; 3],
    feature: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cosine: Option<f64>,
}

#[derive(Serialize)]
struct QueryOutput {
    points: Vec<QueryPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_cosine: Option<f64>,
}

fn query(a: QueryArgs) -> Outcome {
    let map = LatentMap::load(&a.map)?;
    let points = read_rows(&a.points, Some(3))?;
    let reference = match &a.reference {
        Some(p) => {
            let rows = read_rows(p, Some(map.decoder.out_dim()))?;
            if rows.len() != points.len() {
                return Err(Error::Parse {
                    path: p.clone(),
                    message: format!("{} reference rows for {} points", rows.len(), points.len()),
                }
                .into());
            }
            Some(rows)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let x = [p[0], p[1], p[2]];
        let feature = map.query(&x)?;
        let cosine = reference
            .as_ref()
            .map(|r| latmap_core::trainer::cosine_similarity(&feature, &r[i]));
        out.push(QueryPoint { x, feature, cosine });
    }
    let mean_cosine = reference
        .is_some()
        .then(|| out.iter().filter_map(|q| q.cosine).sum::<f64>() / out.len().max(1) as f64);
    let json = serde_json::to_string_pretty(&QueryOutput {
        points: out,
        mean_cosine,
    })
    .map_err(Error::from)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn token(ctx: &Ctx, a: TokenArgs) -> Outcome {
    let map = LatentMap::load(&a.map)?;
    let weights = match &a.weights {
        Some(p) => load_aggregator(p)?,
        None => {
            let s = &ctx.cfg.aggregator;
            AggregatorWeights::init(
                ctx.seed,
                map.decoder.out_dim(),
                PosEncConfig {
                    num_frequencies: s.num_frequencies,
                },
                &s.hidden,
                s.token_dim,
            )?
        }
    };
    let token = map_token(&map.grid, &map.decoder, &weights, a.allow_empty)?;
    let format = match a.format {
        TokenFormatArg::Binary => TokenFormat::Binary,
        TokenFormatArg::Text => TokenFormat::Text,
    };
    save_token(&token.values, &a.out, format)?;
    if let Some(p) = &a.save_weights {
        save_aggregator(&weights, p)?;
    }
    println!(
        "vertices={} dim={} source_map={:016x}",
        token.vertex_count,
        token.values.len(),
        token.source_map
    );
    Ok(())
}

fn export(ctx: &Ctx, a: ExportArgs) -> Outcome {
    let map = LatentMap::load(&a.map)?;
    let n = export_pca_ply(&map, &a.out, ctx.seed)?;
    println!("points={n}");
    Ok(())
}

fn parse_relocation(raw: &str) -> Result<Relocation, Failure> {
    let bad = || Failure::Usage(format!("--relocate expects REGION@FRAME, got {raw:?}"));
    let (r, f) = raw.split_once('@').ok_or_else(bad)?;
    Ok(Relocation {
        region: r.trim().parse().map_err(|_| bad())?,
        at_frame: f.trim().parse().map_err(|_| bad())?,
    })
}

#[derive(Serialize)]
struct OracleRegion {
    region: usize,
    min: [f64; 3],
    max: [f64; 3],
    center: [f64; 3],
    prototype: Vec<f64>,
}

/// Ground truth for the scene as it stands after the last training frame.
#[derive(Serialize)]
struct Oracle {
    spec: SynthSpec,
    bounds: Bounds,
    phase: usize,
    regions: Vec<OracleRegion>,
    background: Vec<f64>,
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Outcome {
    let mut spec = ctx.cfg.synth.clone();
    spec.num_regions = a.regions.unwrap_or(spec.num_regions);
    spec.embedding_dim = a.dim.unwrap_or(spec.embedding_dim);
    spec.train_frames = a.frames.unwrap_or(spec.train_frames);
    spec.heldout_frames = a.heldout.unwrap_or(spec.heldout_frames);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.dynamic_arm |= a.dynamic_arm;
    if let Some(r) = &a.relocate {
        spec.relocation = Some(parse_relocation(r)?);
    }
    let scene = SynthScene::new(spec.clone())?;
    let ds = scene.dataset()?;
    let manifest = write_dataset(&a.out, &ds)?;

    let steps = ds
        .split(Split::Train)
        .map(|f| StreamEntry {
            frame: Some(f.id.clone()),
            grasping: false,
        })
        .collect();
    write_stream(
        &a.out.join("stream.json"),
        &StreamManifest {
            version: FORMAT_VERSION,
            dataset: latmap_core::store::dataset::MANIFEST_FILE.into(),
            steps,
        },
    )?;

    let phase = scene.phase_of(spec.train_frames.saturating_sub(1));
    let regions = (0..scene.num_regions())
        .map(|r| {
            let b = scene.region_box(r, phase);
            OracleRegion {
                region: r,
                min: b.min,
                max: b.max,
                center: b.center(),
                prototype: scene.prototype(r).to_vec(),
            }
        })
        .collect();
    let oracle = Oracle {
        bounds: SynthSpec::bounds(),
        phase,
        regions,
        background: scene.background().to_vec(),
        spec,
    };
    let json = serde_json::to_string_pretty(&oracle).map_err(Error::from)?;
    latmap_core::store::write_atomic(&a.out.join("oracle.json"), json.as_bytes())?;
    ctx.log(format!("synth: wrote {}", manifest.display()));
    println!("frames={} manifest={}", ds.frames.len(), manifest.display());
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx, a: GradcheckArgs) -> Outcome {
    if a.cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    let cfg = GradcheckConfig {
        cases: a.cases,
        seed: ctx.seed,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg)?;
    for case in report.cases.iter().filter(|c| !c.passed()) {
        for f in &case.failures {
            ctx.log(format!("case seed {}: {f}", case.seed));
        }
    }
    let line = format!(
        "cases={} partials={} max_rel_error={:.3e} floor_passes={}",
        report.cases.len(),
        report.checked(),
        report.max_rel_error(),
        report.floor_passes()
    );
    if !report.passed() {
        let failed = report.cases.iter().filter(|c| !c.passed()).count();
        return Err(Failure::Check(format!(
            "{failed} of {} gradient cases failed; {line}",
            report.cases.len()
        )));
    }
    println!("{line}");
    Ok(())
}
