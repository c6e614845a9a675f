//! `qcqc` command line. Exit codes: 0 success, 1 validation or usage error,
//! 2 IO or endpoint failure.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qcqc_core::evalharness::{
    render_report, synthetic_gallery, EvalError, Method, ReportFormat, SynthConfig,
};
use qcqc_core::gallery::{self, Gallery, GalleryError, SchemePair};
use qcqc_core::quantile::{assign_levels_lenient, fit_gallery_schemes, LevelPreset};
use qcqc_core::ranklab::{run_campaign, CampaignConfig, DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_DIM};
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::error::ApiError;
use crate::server::{self, AppState, CompleteRequest, GridConfig, PipelineRequest, Snapshot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<GalleryError> for CliError {
    fn from(e: GalleryError) -> Self {
        match e {
            GalleryError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        let message = format!("{}: {}", e.code, e.message);
        if (400..500).contains(&e.http_status) {
            CliError::Validation(message)
        } else {
            CliError::Io(message)
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            other => ApiError::from(other).into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "qcqc", version, about = "Quality-controllable text-to-image retrieval")]
pub struct Cli {
    /// key = value settings file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and embedding file and write a gallery directory
    Ingest(IngestArgs),
    /// Fit percentile level schemes and store them with the gallery
    Levels(LevelsArgs),
    /// Complete a query prefix under a quality condition
    Complete(CompleteArgs),
    /// Retrieve the top-eta images for a query, optionally completing it first
    Retrieve(RetrieveArgs),
    /// Evaluate a completion method over the full condition grid
    Eval(EvalArgs),
    /// Cosine top-k then aesthetic rerank baseline
    Rerank(RerankArgs),
    /// Rank-gain experiments
    Theory {
        #[command(subcommand)]
        action: TheoryCommand,
    },
    /// Start the HTTP service
    Serve(ServeArgs),
    /// Write a seeded synthetic gallery
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct GalleryArgs {
    /// Gallery directory
    #[arg(long)]
    pub gallery: PathBuf,
    /// Schemes JSON ({rel, aes}) overriding the stored one
    #[arg(long)]
    pub scheme: Option<PathBuf>,
    /// Refit levels with the 3- or 5-level preset
    #[arg(long, value_parser = parse_level_count)]
    pub levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output gallery directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LevelsArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Comma separated percentiles, e.g. 33,66
    #[arg(long = "p", value_delimiter = ',', conflicts_with = "levels")]
    pub percentiles: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_level_count)]
    pub levels: Option<usize>,
    /// Comma separated level names; defaults to the preset names
    #[arg(long, value_delimiter = ',')]
    pub names: Option<Vec<String>>,
    /// Also write the schemes JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub gallery: GalleryArgs,
    #[arg(long)]
    pub prefix: String,
    #[arg(long)]
    pub rel: String,
    #[arg(long)]
    pub aes: String,
    #[arg(long, default_value = "corpus", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value_t = server::DEFAULT_COMPLETE_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub gallery: GalleryArgs,
    #[arg(long)]
    pub query: String,
    #[arg(long, requires = "aes")]
    pub rel: Option<String>,
    #[arg(long, requires = "rel")]
    pub aes: Option<String>,
    #[arg(long, default_value = "corpus", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value_t = server::DEFAULT_ETA)]
    pub eta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Prefix file, one per line; defaults to the 80 class queries
    #[arg(long)]
    pub prefixes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = parse_format)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub gallery: GalleryArgs,
    #[command(flatten)]
    pub report: ReportArgs,
    #[arg(long, default_value = "corpus", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value_t = 1)]
    pub eta: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub gallery: GalleryArgs,
    #[command(flatten)]
    pub report: ReportArgs,
    /// Comma separated candidate pool sizes
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
    pub k: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum TheoryCommand {
    /// Monte Carlo campaign over generated instances
    Run(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed m,d,n; random dimensions when omitted
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    pub max_dim: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub gallery: GalleryArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Overrides the configured port
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Enable the snapshot reload endpoint
    #[arg(long)]
    pub admin: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long, default_value_t = 3, value_parser = parse_level_count)]
    pub levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Must match the serving embed_seed for consistent queries
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_level_count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if LevelPreset::from_count(n).is_some() => Ok(n),
        _ => Err(format!("levels must be 3 or 5, got {s:?}")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse::<ReportFormat>().map_err(|e| e.to_string())
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("dims must be m,d,n: {e}"))?;
    match parts[..] {
        [m, d, n] if m > 0 && d > 0 && n > 0 => Ok((m, d, n)),
        _ => Err(format!("dims must be three positive integers m,d,n, got {s:?}")),
    }
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value)
        .map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn read_schemes(path: &Path) -> Result<SchemePair, CliError> {
    let body = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&body)
        .map_err(|e| CliError::Validation(format!("invalid schemes file {}: {e}", path.display())))
}

fn refit(gallery: Gallery, preset: LevelPreset) -> Result<Gallery, CliError> {
    let (rel, aes) = fit_gallery_schemes(&gallery, preset.names(), preset.percentiles())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(assign_levels_lenient(gallery, rel, aes).0)
}

/// Loads the gallery and applies `--scheme` / `--levels`.
fn open_gallery(args: &GalleryArgs) -> Result<Gallery, CliError> {
    let gallery = gallery::load(&args.gallery)?;
    if let Some(path) = &args.scheme {
        let pair = read_schemes(path)?;
        return Ok(assign_levels_lenient(gallery, pair.rel, pair.aes).0);
    }
    match args.levels.and_then(LevelPreset::from_count) {
        Some(preset) => refit(gallery, preset),
        None => Ok(gallery),
    }
}

fn open_snapshot(args: &GalleryArgs, config: &Config) -> Result<Snapshot, CliError> {
    Ok(Snapshot::new(
        open_gallery(args)?,
        config,
        Some(args.gallery.clone()),
    ))
}

fn read_prefixes(path: Option<&Path>) -> Result<Option<Vec<String>>, CliError> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let prefixes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if prefixes.is_empty() {
        return Err(CliError::Validation(format!("{} has no prefixes", path.display())));
    }
    Ok(Some(prefixes))
}

fn emit(out: &mut dyn Write, body: &str, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, body)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display()))),
        None => {
            out.write_all(body.as_bytes())?;
            if !body.ends_with('\n') {
                writeln!(out)?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct GallerySummary<'a> {
    gallery_n: usize,
    dim: usize,
    gallery_hash: String,
    out: &'a Path,
}

#[derive(Serialize)]
struct RetrieveOutput {
    query: String,
    /// Text that was embedded: the query itself or its completion.
    text: String,
    candidate: Option<qcqc_core::CompletionCandidate>,
    hits: Vec<server::ApiHit>,
}

fn ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let gallery = gallery::ingest(&args.manifest, &args.embeddings)?;
    gallery::save(&gallery, &args.out)?;
    write_json(
        out,
        &GallerySummary {
            gallery_n: gallery.len(),
            dim: gallery.dim(),
            gallery_hash: gallery.content_hash(),
            out: &args.out,
        },
    )
}

fn levels(args: &LevelsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let gallery = gallery::load(&args.gallery)?;
    let preset = args.levels.and_then(LevelPreset::from_count);
    let percentiles = match (&args.percentiles, preset) {
        (Some(p), _) => p.clone(),
        (None, Some(preset)) => preset.percentiles(),
        (None, None) => LevelPreset::Three.percentiles(),
    };
    let names = match &args.names {
        Some(names) => names.clone(),
        None => match LevelPreset::from_count(percentiles.len() + 1) {
            Some(preset) => preset.names(),
            None => {
                return Err(CliError::Validation(format!(
                    "{} percentiles need explicit --names",
                    percentiles.len()
                )))
            }
        },
    };
    let (rel, aes) = fit_gallery_schemes(&gallery, names, percentiles)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let (gallery, unlevelled) = assign_levels_lenient(gallery, rel.clone(), aes.clone());
    if unlevelled > 0 {
        tracing::warn!(unlevelled, "records without both scores keep no levels");
    }
    gallery::save(&gallery, &args.gallery)?;
    let pair = SchemePair { rel, aes };
    if let Some(path) = &args.out {
        let body = serde_json::to_vec_pretty(&pair).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, body)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    write_json(out, &pair)
}

fn complete(args: &CompleteArgs, config: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let snap = open_snapshot(&args.gallery, config)?;
    let candidates = snap.complete(&CompleteRequest {
        prefix: args.prefix.clone(),
        rel: args.rel.clone(),
        aes: args.aes.clone(),
        method: args.method,
        k: args.k,
        seed: args.seed,
    })?;
    write_json(out, &server::CompleteResponse { candidates })
}

fn retrieve(args: &RetrieveArgs, config: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let snap = open_snapshot(&args.gallery, config)?;
    let output = match (&args.rel, &args.aes) {
        (Some(rel), Some(aes)) => {
            let mut result = snap.pipeline(&PipelineRequest {
                prefix: args.query.clone(),
                rel: rel.clone(),
                aes: aes.clone(),
                method: args.method,
                eta: args.eta,
                k: 1,
                seed: args.seed,
            })?;
            let candidate = result.candidates.pop();
            RetrieveOutput {
                query: args.query.clone(),
                text: candidate
                    .as_ref()
                    .map_or_else(|| args.query.clone(), |c| c.text.clone()),
                candidate,
                hits: result.hits_per_candidate.pop().unwrap_or_default(),
            }
        }
        _ => RetrieveOutput {
            query: args.query.clone(),
            text: args.query.clone(),
            candidate: None,
            hits: snap
                .hits(std::slice::from_ref(&args.query), args.eta)?
                .pop()
                .unwrap_or_default(),
        },
    };
    write_json(out, &output)
}

fn eval(args: &EvalArgs, config: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let mut snap = open_snapshot(&args.gallery, config)?;
    if !snap.gallery.has_levels() {
        snap.gallery = refit(snap.gallery, LevelPreset::Three)?;
    }
    let report = snap.eval(GridConfig {
        prefixes: read_prefixes(args.report.prefixes.as_deref())?,
        conditions: None,
        eta: Some(args.eta),
        method: Some(args.method),
        seed: Some(args.seed),
        k: Some(args.k),
    })?;
    let body = render_report(&report, args.report.format)?;
    emit(out, &body, args.report.out.as_deref())
}

fn rerank(args: &RerankArgs, config: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let snap = open_snapshot(&args.gallery, config)?;
    let prefixes = read_prefixes(args.report.prefixes.as_deref())?;
    let reports = args
        .k
        .iter()
        .map(|&k| {
            snap.eval(GridConfig {
                prefixes: prefixes.clone(),
                method: Some(Method::Rerank),
                k: Some(k),
                ..GridConfig::default()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let body = match args.report.format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(&reports).map_err(|e| CliError::Io(e.to_string()))?
        }
        format => reports
            .iter()
            .map(|r| render_report(r, format))
            .collect::<Result<Vec<_>, _>>()?
            .join("\n"),
    };
    emit(out, &body, args.report.out.as_deref())
}

fn theory(args: &TheoryArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Validation("trials must be at least 1".into()));
    }
    let report = run_campaign(&CampaignConfig {
        trials: args.trials,
        seed: args.seed,
        dims: args.dims,
        max_dim: args.max_dim,
        max_attempts: args.max_attempts,
    })
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    emit(out, &body, args.out.as_deref())
}

fn serve(args: &ServeArgs, mut config: Config) -> Result<(), CliError> {
    if let Some(port) = args.port {
        config.port = port;
    }
    if args.static_dir.is_some() {
        config.static_dir = args.static_dir.clone();
    }
    config.admin |= args.admin;
    let snapshot = open_snapshot(&args.gallery, &config)?;
    let addr = SocketAddr::new(args.host, config.port);
    let state = AppState::new(snapshot, config);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(server::serve(state, addr))?;
    Ok(())
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = SynthConfig {
        n: args.n,
        levels: args.levels,
        dim: args.dim,
        seed: args.seed,
        embed_seed: args.embed_seed,
    };
    let gallery = synthetic_gallery(&config)?;
    gallery::save(&gallery, &args.out)?;
    write_json(
        out,
        &GallerySummary {
            gallery_n: gallery.len(),
            dim: gallery.dim(),
            gallery_hash: gallery.content_hash(),
            out: &args.out,
        },
    )
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = Config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Levels(a) => levels(a, out),
        Command::Complete(a) => complete(a, &config, out),
        Command::Retrieve(a) => retrieve(a, &config, out),
        Command::Eval(a) => eval(a, &config, out),
        Command::Rerank(a) => rerank(a, &config, out),
        Command::Theory {
            action: TheoryCommand::Run(a),
        } => theory(a, out),
        Command::Serve(a) => serve(a, config),
        Command::Synth(a) => synth(a, out),
    }
}

/// Parses `args` (program name first) and runs the command, writing results
/// to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_VALIDATION
                }
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}
