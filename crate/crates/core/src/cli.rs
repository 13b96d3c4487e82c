//! Command-line front end. [`run`] maps every outcome to an exit code.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::decoder::{
    decode, generate_synthetic_model, load_model, model_digest, save_model, CacheMode, DecodeOptions,
    ModelConfig, ModelWeights, Strategy, TokenSequence,
};
use crate::diagnostics::{
    collapse_metric, compare_modes, decay_rate_sweep, round_json_floats, visual_attention_curve, AttentionTrace,
};
use crate::masks::{RegisterSchedule, DEFAULT_ALPHA_BASE, DEFAULT_REF_LEN};
use crate::verify::{reports_to_csv, run_property_suite, Mutation, SuiteConfig, DEFAULT_SEED};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "farsight", version, about = "Register attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic model and print its digest.
    GenModel(GenModelArgs),
    /// Generate tokens from a model file.
    Decode(DecodeArgs),
    /// Visual decay curve from a trace file, or a fresh mode comparison.
    Diagnose(DiagnoseArgs),
    /// Visual attention statistics across decay rates.
    Sweep(SweepArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub d_model: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Uniform,
    PerHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheKind {
    Recompute,
    KvCache,
}

/// Settings shared by `decode` and a fresh `diagnose`; also the shape of the
/// `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Number of leading prompt tokens that are vision tokens.
    #[arg(long)]
    pub vision_prefix: Option<usize>,
    #[arg(long, value_parser = parse_mask)]
    #[serde(default, deserialize_with = "de_mask")]
    pub mask: Option<MaskMode>,
    /// Explicit decay rate. Conflicts with --seq/--alpha.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Reference length for `sigma = log_alpha(seq)`.
    #[arg(long)]
    pub seq: Option<usize>,
    /// Log base for `sigma = log_alpha(seq)`.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    /// Scale surviving scores by sigma before adding registers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pseudocode_scaling: Option<bool>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long, value_enum)]
    pub cache: Option<CacheKind>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the attention trace CSV here.
    #[arg(long)]
    pub dump_trace: Option<PathBuf>,
}

fn parse_mask(s: &str) -> Result<MaskMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn de_mask<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<MaskMode>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| parse_mask(&s).map_err(serde::de::Error::custom)).transpose()
}

impl RunConfig {
    /// Fills every unset field from `base`.
    pub fn or(self, base: RunConfig) -> RunConfig {
        RunConfig {
            model: self.model.or(base.model),
            prompt: self.prompt.or(base.prompt),
            vision_prefix: self.vision_prefix.or(base.vision_prefix),
            mask: self.mask.or(base.mask),
            sigma: self.sigma.or(base.sigma),
            seq: self.seq.or(base.seq),
            alpha: self.alpha.or(base.alpha),
            schedule: self.schedule.or(base.schedule),
            pseudocode_scaling: self.pseudocode_scaling.or(base.pseudocode_scaling),
            strategy: self.strategy.or(base.strategy),
            temperature: self.temperature.or(base.temperature),
            seed: self.seed.or(base.seed),
            beam_width: self.beam_width.or(base.beam_width),
            max_new_tokens: self.max_new_tokens.or(base.max_new_tokens),
            cache: self.cache.or(base.cache),
            out: self.out.or(base.out),
            dump_trace: self.dump_trace.or(base.dump_trace),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))
    }

    /// Decay schedule: explicit sigma, or `log_alpha(seq)` with the reference
    /// defaults filling a missing half of the pair.
    pub fn schedule(&self, head_count: usize) -> Result<RegisterSchedule, CliError> {
        let base = match (self.sigma, self.seq, self.alpha) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(CliError::Usage("give either --sigma or --seq/--alpha, not both".into()))
            }
            (Some(s), None, None) => RegisterSchedule::with_sigma(s),
            (None, seq, alpha) => RegisterSchedule::from_reference(
                seq.unwrap_or(DEFAULT_REF_LEN),
                alpha.unwrap_or(DEFAULT_ALPHA_BASE),
            ),
        }
        .map_err(usage)?;
        let s = base.with_pseudocode_scaling(self.pseudocode_scaling.unwrap_or(false));
        match self.schedule.unwrap_or(ScheduleKind::Uniform) {
            ScheduleKind::Uniform => Ok(s),
            ScheduleKind::PerHead => s.per_head(head_count).map_err(usage),
        }
    }

    pub fn prompt(&self) -> Result<TokenSequence, CliError> {
        let text = self.prompt.as_deref().ok_or_else(|| CliError::Usage("--prompt is required".into()))?;
        let ids = parse_list::<usize>(text, "--prompt")?;
        if ids.is_empty() {
            return Err(CliError::Usage("--prompt needs at least one id".into()));
        }
        TokenSequence::new(ids, self.vision_prefix.unwrap_or(0)).map_err(usage)
    }

    pub fn load_model(&self) -> Result<ModelWeights, CliError> {
        let path = self.model.as_ref().ok_or_else(|| CliError::Usage("--model is required".into()))?;
        require_file(path)?;
        load_model(path).map_err(|e| input(path, e))
    }

    pub fn decode_options(&self, model: &ModelWeights) -> Result<DecodeOptions, CliError> {
        let strategy = match self.strategy.unwrap_or(StrategyKind::Greedy) {
            StrategyKind::Greedy => Strategy::Greedy,
            StrategyKind::Sample => Strategy::Sample {
                temperature: self.temperature.unwrap_or(1.0),
                seed: self.seed.unwrap_or(0),
            },
            StrategyKind::Beam => Strategy::Beam { width: self.beam_width.unwrap_or(4) },
        };
        let mut opts = DecodeOptions::new(
            strategy,
            self.mask.unwrap_or(MaskMode::FarSight),
            self.schedule(model.config.head_count)?,
            self.max_new_tokens.unwrap_or(16),
        );
        opts.cache = match self.cache.unwrap_or(CacheKind::Recompute) {
            CacheKind::Recompute => CacheMode::Recompute,
            CacheKind::KvCache => CacheMode::KvCache,
        };
        opts.record_trace = self.dump_trace.is_some();
        opts.validate().map_err(usage)?;
        Ok(opts)
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Trace CSV from `decode --dump-trace`. Without it a fresh comparison runs.
    #[arg(long, conflicts_with_all = ["config", "steps", "curves"])]
    pub trace: Option<PathBuf>,
    /// Comma-separated outlier key positions for the collapse report.
    #[arg(long)]
    pub outliers: Option<String>,
    /// Generated steps for a fresh comparison.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory receiving one `<mode>.csv` decay curve per mask mode.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub vision_prefix: usize,
    /// Comma-separated decay rates.
    #[arg(long, default_value = "0.1,0.2,0.4,0.6,0.8,1.0,1.5,2.0")]
    pub sigmas: String,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "2,3,8,32,128")]
    pub sizes: String,
    /// Inject a defect into the kernel under test.
    #[arg(long, value_parser = parse_mutation)]
    pub mutate: Option<Mutation>,
    /// Report CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn input(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>, CliError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("{flag}: cannot parse {s:?}"))))
        .collect()
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(usage),
    }
}

fn to_rounded_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializable");
    round_json_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
    s.push('\n');
    s
}

fn read_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            require_file(p)?;
            RunConfig::from_toml(&fs::read_to_string(p).map_err(usage)?)
        }
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// results to `out` and messages to `err`. Returns the exit code.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenModel(a) => cmd_gen_model(&a, out),
        Command::Decode(a) => cmd_decode(&a, out),
        Command::Diagnose(a) => cmd_diagnose(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Verify(a) => cmd_verify(&a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock())
}

pub fn cmd_gen_model(a: &GenModelArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = generate_synthetic_model(ModelConfig {
        vocab_size: a.vocab,
        d_model: a.d_model,
        head_count: a.heads,
        layer_count: a.layers,
        seed: Some(a.seed),
    })
    .map_err(usage)?;
    save_model(&model, &a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    let digest = model_digest(&model).map_err(usage)?;
    writeln!(out, "{digest}  {}", a.out.display()).map_err(usage)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct DecodeReport {
    mask: MaskMode,
    sigma: f64,
    strategy: Strategy,
    prompt: Vec<usize>,
    vision_prefix: usize,
    generated: Vec<usize>,
    log_probs: Vec<f64>,
    cumulative_log_prob: f64,
}

pub fn cmd_decode(a: &DecodeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let run = a.run.clone().or(read_config(a.config.as_ref())?);
    let model = run.load_model()?;
    let prompt = run.prompt()?;
    prompt.validate(model.config.vocab_size).map_err(usage)?;
    let opts = run.decode_options(&model)?;
    let r = decode(&model, &prompt, &opts).map_err(usage)?;
    if let Some(p) = &run.dump_trace {
        let file = fs::File::create(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        r.trace.write_csv(io::BufWriter::new(file)).map_err(usage)?;
    }
    let report = DecodeReport {
        mask: opts.mode,
        sigma: opts.schedule.sigma,
        strategy: opts.strategy,
        prompt: prompt.ids().to_vec(),
        vision_prefix: prompt.vision_len(),
        log_probs: r.steps.iter().map(|s| s.log_prob).collect(),
        generated: r.generated,
        cumulative_log_prob: r.cumulative_log_prob,
    };
    write_output(run.out.as_deref(), &to_rounded_json(&report), out)?;
    Ok(EXIT_OK)
}

pub fn cmd_diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let outliers = match &a.outliers {
        Some(s) => parse_list::<usize>(s, "--outliers")?,
        None => Vec::new(),
    };
    match &a.trace {
        Some(path) => diagnose_trace(path, a, &outliers, out),
        None => diagnose_fresh(a, &outliers, out),
    }
}

fn diagnose_trace(path: &Path, a: &DiagnoseArgs, outliers: &[usize], out: &mut dyn Write) -> Result<i32, CliError> {
    require_file(path)?;
    let file = fs::File::open(path).map_err(usage)?;
    let trace = AttentionTrace::read_csv(BufReader::new(file)).map_err(|e| input(path, e))?;
    let vision = a.run.vision_prefix.ok_or_else(|| CliError::Usage("--vision-prefix is required".into()))?;
    let curve = visual_attention_curve(&trace, vision).map_err(usage)?;
    write_output(a.run.out.as_deref(), &curve.to_csv(), out)?;
    if !outliers.is_empty() {
        let report = collapse_metric(&trace, outliers).map_err(usage)?;
        write_output(None, &to_rounded_json(&report), out)?;
    }
    Ok(EXIT_OK)
}

fn diagnose_fresh(a: &DiagnoseArgs, outliers: &[usize], out: &mut dyn Write) -> Result<i32, CliError> {
    let run = a.run.clone().or(read_config(a.config.as_ref())?);
    let model = run.load_model()?;
    let prompt = run.prompt()?;
    prompt.validate(model.config.vocab_size).map_err(usage)?;
    let schedule = run.schedule(model.config.head_count)?;
    let steps = a.steps.or(run.max_new_tokens).unwrap_or(8);
    let report = compare_modes(&model, &prompt, &schedule, steps, outliers).map_err(usage)?;
    if let Some(dir) = &a.curves {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        for (mode, r) in &report.modes {
            let p = dir.join(format!("{mode}.csv"));
            fs::write(&p, r.decay_curve.to_csv()).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        }
    }
    write_output(run.out.as_deref(), &format!("{}\n", report.to_json()), out)?;
    Ok(EXIT_OK)
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    require_file(&a.model)?;
    let model = load_model(&a.model).map_err(|e| input(&a.model, e))?;
    let prompt = TokenSequence::new(parse_list(&a.prompt, "--prompt")?, a.vision_prefix).map_err(usage)?;
    prompt.validate(model.config.vocab_size).map_err(usage)?;
    let sigmas: Vec<f64> = parse_list(&a.sigmas, "--sigmas")?;
    if sigmas.is_empty() {
        return Err(CliError::Usage("--sigmas needs at least one value".into()));
    }
    let rows = decay_rate_sweep(&model, &prompt, &sigmas, a.steps).map_err(usage)?;
    let mut csv = String::from("sigma,mean_visual_mass,visual_entropy\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            crate::diagnostics::fmt_sig9(r.sigma),
            crate::diagnostics::fmt_sig9(r.mean_visual_mass),
            crate::diagnostics::fmt_sig9(r.visual_entropy)
        ));
    }
    write_output(a.out.as_deref(), &csv, out)?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let sizes: Vec<usize> = parse_list(&a.sizes, "--sizes")?;
    let config = SuiteConfig { seed: a.seed, sizes, mutation: a.mutate, ..SuiteConfig::default() };
    let reports = run_property_suite(&config).map_err(usage)?;
    write_output(a.out.as_deref(), &reports_to_csv(&reports), out)?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
    for r in &failed {
        let _ = writeln!(err, "FAILED {} (size {}, max_dev {:e})", r.property, r.size, r.max_dev);
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}
