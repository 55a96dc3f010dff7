use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use turnpack_cli::container::{write_container, ContainerError, Contents};
use turnpack_cli::corpus::{read_corpus_validated, CorpusError};
use turnpack_cli::render::{render_mask_ascii, render_mask_pgm};
use turnpack_core::{
    apply_delimiters, build_layout, build_token_mask, conversation_stats, expand_to_passes,
    pack_batch_with, pack_with, run_scaling_study, verify_with_config, CostError, CostMode,
    ModelConfig, ModelError, OracleError, PackError, PackOptions, PositionalFamily, Precision,
    StudySpec, TokenId, ValidatedConversation, DEFAULT_DENSE_MASK_CAP,
};

#[derive(Parser)]
#[command(
    name = "turnpack",
    version,
    about = "Pack multi-turn reasoning conversations into single-pass training inputs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pack a JSONL corpus into binary tensor containers
    Pack(PackArgs),
    /// Write each conversation's naive per-turn passes as JSONL
    Expand(ExpandArgs),
    /// Prove packed/naive loss equality on a small reference model
    Verify(VerifyArgs),
    /// Run the attention-cost scaling study and emit CSV
    Bench(BenchArgs),
    /// Render a conversation's attention mask
    Viz(VizArgs),
    /// Print per-conversation size statistics as JSONL
    Stats(StatsArgs),
}

#[derive(clap::Args)]
struct PackArgs {
    /// Input corpus (JSONL, one conversation per line)
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output directory for .rpk containers
    #[arg(long = "out", value_name = "DIR")]
    out: PathBuf,
    /// Append this token to every reasoning span (requires --eot-id)
    #[arg(long)]
    sep_id: Option<u32>,
    /// Append this token to every response (requires --sep-id)
    #[arg(long)]
    eot_id: Option<u32>,
    /// Skip the dense token mask above this sequence length
    #[arg(long, default_value_t = DEFAULT_DENSE_MASK_CAP)]
    dense_mask_cap: usize,
    /// Group this many conversations into right-padded batch files
    #[arg(long)]
    batch: Option<usize>,
    /// Pad token for batches
    #[arg(long, default_value_t = 0)]
    pad_id: u32,
}

#[derive(clap::Args)]
struct ExpandArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output JSONL, one naive pass per line
    #[arg(long = "out", value_name = "FILE")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Model init seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Model width
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Model vocabulary; every corpus token must fall below it
    #[arg(long, default_value_t = 97)]
    vocab: u32,
    /// Positional-encoding family
    #[arg(long, value_enum, default_value_t = PosArg::Rotary)]
    pos: PosArg,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    precision: PrecisionArg,
    /// Max per-token NLL difference; defaults to 1e-9 (double) or 1e-4 (single)
    #[arg(long, allow_negative_numbers = true)]
    tol: Option<f64>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Turn counts to sweep
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64, 128])]
    n: Vec<usize>,
    /// Tokens per segment (human, reasoning, and response all use this)
    #[arg(long, default_value_t = 16)]
    len: usize,
    /// Hidden width used for the flops column
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Cost modes to report
    #[arg(long, value_delimiter = ',', default_values_t = vec!["naive".to_string(), "packed".to_string()])]
    modes: Vec<String>,
    /// Also time real forward passes (slow; uses a 1-layer model of width --d)
    #[arg(long)]
    wall: bool,
    /// Write the CSV here instead of stdout
    #[arg(long = "out", value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct VizArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Which conversation of the corpus to render (0-based)
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Segment)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FmtArg::Ascii)]
    fmt: FmtArg,
    #[arg(long = "out", value_name = "FILE")]
    out: PathBuf,
    /// Refuse token-level rendering above this sequence length
    #[arg(long, default_value_t = DEFAULT_DENSE_MASK_CAP)]
    dense_mask_cap: usize,
}

#[derive(clap::Args)]
struct StatsArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosArg {
    Rotary,
    Sinusoidal,
}

impl From<PosArg> for PositionalFamily {
    fn from(p: PosArg) -> Self {
        match p {
            PosArg::Rotary => PositionalFamily::Rotary,
            PosArg::Sinusoidal => PositionalFamily::Sinusoidal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Segment,
    Token,
}

#[derive(Clone, Copy, ValueEnum)]
enum FmtArg {
    Pgm,
    Ascii,
}

/// Exit codes: 1 validation or parse failure, 2 verification failure,
/// 3 I/O failure.
#[derive(Debug)]
enum AppError {
    Validation(String),
    Verification(String),
    Io(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Verification(_) => 2,
            AppError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Verification(m) | AppError::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<CorpusError> for AppError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<ContainerError> for AppError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<PackError> for AppError {
    fn from(e: PackError) -> Self {
        AppError::Validation(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        AppError::Validation(e.to_string())
    }
}

impl From<OracleError> for AppError {
    fn from(e: OracleError) -> Self {
        AppError::Validation(e.to_string())
    }
}

impl From<CostError> for AppError {
    fn from(e: CostError) -> Self {
        AppError::Validation(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Pack(args) => cmd_pack(args),
        Cmd::Expand(args) => cmd_expand(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Viz(args) => cmd_viz(args),
        Cmd::Stats(args) => cmd_stats(args),
    }
}

fn load(input: &Path, vocab: Option<u32>) -> Result<Vec<ValidatedConversation>, AppError> {
    let file = File::open(input)
        .map_err(|e| AppError::Io(format!("{}: {e}", input.display())))?;
    Ok(read_corpus_validated(BufReader::new(file), vocab)?)
}

fn safe_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_pack(args: PackArgs) -> Result<(), AppError> {
    let delimiters = match (args.sep_id, args.eot_id) {
        (None, None) => None,
        (Some(sep), Some(eot)) => Some((TokenId(sep), TokenId(eot))),
        _ => {
            return Err(AppError::Validation(
                "--sep-id and --eot-id must be given together".into(),
            ))
        }
    };
    let mut cs = load(&args.input, None)?;
    if let Some((sep, eot)) = delimiters {
        cs = cs.iter().map(|c| apply_delimiters(c, sep, eot)).collect();
    }
    std::fs::create_dir_all(&args.out)?;
    let opts = PackOptions {
        dense_mask_cap: args.dense_mask_cap,
    };
    match args.batch {
        Some(0) => Err(AppError::Validation("--batch must be at least 1".into())),
        Some(b) => {
            for (i, chunk) in cs.chunks(b).enumerate() {
                let batch = pack_batch_with(chunk, TokenId(args.pad_id), &opts)?;
                let file = args.out.join(format!("batch-{i:05}.rpk"));
                let ids: Vec<&str> = batch.items.iter().map(|p| p.id.as_str()).collect();
                let line = serde_json::json!({
                    "file": file.display().to_string(),
                    "ids": ids,
                    "width": batch.width,
                });
                write_container(&file, &Contents::Batch(batch))?;
                println!("{line}");
            }
            Ok(())
        }
        None => {
            for c in &cs {
                let packed = pack_with(c, &opts);
                let file = args.out.join(format!("{}.rpk", safe_file_stem(&packed.id)));
                let line = serde_json::json!({
                    "id": packed.id,
                    "file": file.display().to_string(),
                    "len": packed.len(),
                    "included": packed.n_included(),
                    "dense_mask": packed.mask.is_some(),
                });
                write_container(&file, &Contents::Single(packed))?;
                println!("{line}");
            }
            Ok(())
        }
    }
}

fn cmd_expand(args: ExpandArgs) -> Result<(), AppError> {
    let cs = load(&args.input, None)?;
    let out = File::create(&args.out)
        .map_err(|e| AppError::Io(format!("{}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(out);
    for c in &cs {
        for pass in expand_to_passes(c) {
            let tokens: Vec<u32> = pass.tokens.iter().map(|t| t.0).collect();
            let targets: Vec<i64> = pass
                .targets
                .iter()
                .map(|t| t.map(|x| x.0 as i64).unwrap_or(-1))
                .collect();
            let include: Vec<u8> = pass.include.iter().map(|&b| b as u8).collect();
            let line = serde_json::json!({
                "id": c.id(),
                "pass": pass.pass,
                "tokens": tokens,
                "targets": targets,
                "include": include,
            });
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), AppError> {
    let cs = load(&args.input, Some(args.vocab))?;
    let cfg = ModelConfig::new(args.vocab as usize, args.d, args.layers, args.heads)
        .with_seed(args.seed)
        .with_positional(args.pos.into())
        .with_precision(args.precision.into());
    let mut failures = 0usize;
    for c in &cs {
        let report = verify_with_config(c, &cfg, args.tol)?;
        let line = serde_json::json!({
            "id": report.conversation_id,
            "positional": report.positional,
            "precision": match report.precision {
                Precision::Single => "single",
                Precision::Double => "double",
            },
            "tolerance": report.tolerance,
            "n_labeled": report.n_labeled,
            "max_abs_diff": report.max_abs_diff,
            "max_logit_abs_diff": report.max_logit_abs_diff,
            "packed_total_nll": report.packed_total_nll,
            "npass_total_nll": report.npass_total_nll,
            "passed": report.passed,
        });
        println!("{line}");
        if !report.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(AppError::Verification(format!(
            "{failures} of {} conversation(s) exceeded tolerance",
            cs.len()
        )));
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), AppError> {
    let modes: Vec<CostMode> = args
        .modes
        .iter()
        .map(|s| s.parse().map_err(AppError::from))
        .collect::<Result<_, _>>()?;
    let mut spec = StudySpec::new(args.n.clone(), args.len, args.d).with_modes(modes);
    if args.wall {
        spec = spec.with_wall_model(ModelConfig::new(97, args.d, 1, 1).with_seed(7));
    }
    let report = run_scaling_study(&spec)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_viz(args: VizArgs) -> Result<(), AppError> {
    let cs = load(&args.input, None)?;
    let c = cs.get(args.index).ok_or_else(|| {
        AppError::Validation(format!(
            "--index {} out of range: corpus holds {} conversation(s)",
            args.index,
            cs.len()
        ))
    })?;
    let table = build_layout(c);
    let mask = match args.mode {
        ModeArg::Segment => table.segment_mask(),
        ModeArg::Token => build_token_mask(&table, args.dense_mask_cap)?,
    };
    let bytes = match args.fmt {
        FmtArg::Ascii => render_mask_ascii(&mask).into_bytes(),
        FmtArg::Pgm => render_mask_pgm(&mask),
    };
    std::fs::write(&args.out, bytes)
        .map_err(|e| AppError::Io(format!("{}: {e}", args.out.display())))?;
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), AppError> {
    let cs = load(&args.input, None)?;
    for c in &cs {
        let stats = conversation_stats(c);
        let line = serde_json::json!({
            "id": c.id(),
            "n_turns": stats.n_turns,
            "h_lens": stats.h_lens,
            "t_lens": stats.t_lens,
            "r_lens": stats.r_lens,
            "naive_final_len": stats.naive_final_len,
            "packed_len": stats.packed_len,
        });
        println!("{line}");
    }
    Ok(())
}
