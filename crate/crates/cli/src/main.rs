use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use arplab::bounds::{self, ReportOptions};
use arplab::encoding::{self, DEFAULT_BPE_MERGES};
use arplab::experiments::{self, CorrelationConfig, GenerationConfig, ReEffectConfig};
use arplab::io;
use arplab::markov::{self, build_model, TransitionModel, Vocabulary};
use arplab::metrics::{self, RepNAggregation};
use arplab::perturb::{self, PerturbationDistribution, PerturbationSpec};
use arplab::sampling::{transform_model, TransformSpec};

const DEFAULT_RE_STEPS: usize = 10;
const DEFAULT_TEMPERATURES: &str = "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3";
const DEFAULT_A_GRID: &str = "0.25,0.3,0.35,0.4,0.5,0.6,0.8,1.0";

#[derive(Parser)]
#[command(name = "arplab", version, about = "Repetition analysis for Markov text generation models")]
struct Cli {
    /// Base seed; sequence or trial k uses seed + k.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Count bigrams in a corpus and save the transition model.
    BuildModel(BuildModel),
    /// Exact ARP and its upper bounds, with precondition diagnostics.
    Arp(Arp),
    /// Learn and apply BPE and/or Rebalanced Encoding.
    Encode(Encode),
    /// Sample sequences from a model under a decoding transform.
    Generate(Generate),
    /// Repetition metrics (and optionally ppl-c) for a file of sequences.
    Score(Score),
    /// ARP against repetition metrics over a temperature sweep.
    ExpCorrelation(ExpCorrelation),
    /// Repetition metrics per count of high-inflow pairs.
    ExpInflow(ExpInflow),
    /// Monte Carlo check of the ARP concentration bound.
    ExpConcentration(ExpConcentration),
    /// Model and generation statistics before and after Rebalanced Encoding.
    ExpRe(ExpRe),
}

#[derive(Args)]
struct CorpusArgs {
    /// Whitespace-tokenized text, one sequence per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    max_lines: Option<usize>,
}

#[derive(Args)]
struct BuildModel {
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct Arp {
    #[arg(long)]
    model: PathBuf,
    /// Decoding transform applied to every row, e.g. "temp:0.75" or "topk:10+temp:0.9".
    #[arg(long)]
    transform: Option<TransformSpec>,
    /// Above this vocabulary size the series replaces the closed form and SVD bounds are skipped.
    #[arg(long, default_value_t = bounds::DEFAULT_DENSE_LIMIT)]
    dense_limit: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncodeMode {
    Bpe,
    Re,
    #[value(name = "bpe+re")]
    BpeRe,
}

#[derive(Args)]
struct Encode {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum)]
    mode: EncodeMode,
    #[arg(long, default_value_t = DEFAULT_BPE_MERGES)]
    bpe_merges: usize,
    #[arg(long, default_value_t = experiments::DEFAULT_GAMMA)]
    gamma: f64,
    /// Cap on RE steps.
    #[arg(long, default_value_t = DEFAULT_RE_STEPS)]
    re_steps: usize,
    /// Learn RE on one stream that pairs across sequence boundaries.
    #[arg(long)]
    flat: bool,
    /// Where to write the BPE merge table (default: <out>.bpe.merges).
    #[arg(long)]
    bpe_table: Option<PathBuf>,
    /// Where to write the RE merge table (default: <out>.re.merges).
    #[arg(long)]
    re_table: Option<PathBuf>,
}

#[derive(Args)]
struct GenerationArgs {
    #[arg(long, default_value_t = experiments::DEFAULT_SEQUENCES)]
    sequences: usize,
    #[arg(long, default_value_t = experiments::DEFAULT_MAX_LEN)]
    max_len: usize,
}

impl GenerationArgs {
    fn config(&self, seed: u64) -> GenerationConfig {
        GenerationConfig { sequences: self.sequences, max_len: self.max_len, seed }
    }
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "stochastic")]
    transform: TransformSpec,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Args)]
struct Score {
    /// Sequences to score, one per line.
    #[arg(long)]
    sequences: PathBuf,
    #[arg(long, default_value_t = experiments::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    orders: Vec<usize>,
    /// Pool n-grams over all sequences instead of averaging per sequence.
    #[arg(long)]
    micro: bool,
    /// Report generated/reference perplexity under the model.
    #[arg(long, requires_all = ["reference", "model"])]
    ppl_c: bool,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ExpCorrelation {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_TEMPERATURES)]
    temperatures: Vec<f64>,
    #[arg(long, default_value_t = experiments::DEFAULT_WINDOW)]
    window: usize,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Args)]
struct ExpInflow {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = experiments::DEFAULT_GAMMA)]
    gamma: f64,
    /// Previously generated sequences; sampled from the model when omitted.
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long, default_value = "stochastic")]
    transform: TransformSpec,
    #[arg(long, default_value_t = experiments::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Distribution {
    Uniform,
    TwoPoint,
}

#[derive(Args)]
struct ExpConcentration {
    /// Model file; a synthetic chain is built when omitted.
    #[arg(long, conflicts_with_all = ["synthetic_n", "branching"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    synthetic_n: usize,
    /// Successors per word of the synthetic chain (its zeta*n).
    #[arg(long, default_value_t = 5)]
    branching: usize,
    #[arg(long, default_value_t = 0.9)]
    row_mass: f64,
    /// Perturbation scale; defaults to sqrt(0.5 / n).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum, default_value_t = Distribution::Uniform)]
    distribution: Distribution,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_A_GRID)]
    a_grid: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Series truncation depth; chosen from the tail tolerance when omitted.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct ExpRe {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = experiments::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_RE_STEPS)]
    re_steps: usize,
    #[arg(long, default_value_t = 0.75)]
    temperature: f64,
    #[arg(long, default_value_t = experiments::DEFAULT_WINDOW)]
    window: usize,
    #[command(flatten)]
    generation: GenerationArgs,
}

struct Output {
    path: Option<PathBuf>,
    format: Option<Format>,
}

impl Output {
    fn format_or(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.path {
            Some(p) => io::write_text(p, text)?,
            None => print!("{text}"),
        }
        Ok(())
    }

    fn emit_json(&self, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.emit(&text)
    }

    fn required_path(&self, what: &str) -> Result<&Path> {
        self.path.as_deref().with_context(|| format!("--out is required for {what}"))
    }
}

fn load_corpus(args: &CorpusArgs) -> Result<Vec<Vec<String>>> {
    let corpus = io::ingest(&args.corpus, args.lowercase, args.max_lines)?;
    if corpus.sequences.is_empty() {
        return Err(arplab::Error::EmptyCorpus.into());
    }
    Ok(corpus.sequences)
}

fn build_model_cmd(cmd: &BuildModel, out: &Output) -> Result<()> {
    let seqs = load_corpus(&cmd.corpus)?;
    let model = build_model(&seqs, Vocabulary::from_sequences(&seqs))?;
    io::save_model(&model, out.required_path("build-model")?)?;
    let rho = markov::spectral_radius_b2(&model)?;
    println!("n={} zeta={} rho_b2={} zeta_n={}", model.n(), model.zeta(), rho, model.zeta_n());
    Ok(())
}

fn arp_cmd(cmd: &Arp, out: &Output) -> Result<()> {
    let mut model = io::load_model(&cmd.model)?;
    if let Some(spec) = &cmd.transform {
        model = transform_model(&model, spec)?;
    }
    let opts = ReportOptions { dense_limit: cmd.dense_limit, ..ReportOptions::default() };
    out.emit_json(&bounds::bound_report(&model, &opts)?)
}

fn encode_cmd(cmd: &Encode, out: &Output) -> Result<()> {
    let out_path = out.required_path("encode")?;
    let table_path = |given: &Option<PathBuf>, suffix: &str| {
        given.clone().unwrap_or_else(|| {
            let mut p = out_path.as_os_str().to_owned();
            p.push(suffix);
            PathBuf::from(p)
        })
    };
    let mut seqs = load_corpus(&cmd.corpus)?;
    if cmd.mode != EncodeMode::Re {
        let table = encoding::learn_bpe(&seqs, cmd.bpe_merges)?;
        let mut codec = encoding::BpeCodec::new(&table);
        seqs = seqs.iter().map(|s| codec.encode(s)).collect();
        io::save_merges(&table, table_path(&cmd.bpe_table, ".bpe.merges"))?;
    }
    if cmd.mode != EncodeMode::Bpe {
        let learned = if cmd.flat {
            let stream: Vec<String> = seqs.concat();
            encoding::learn_re(&stream, cmd.re_steps, cmd.gamma)?
        } else {
            encoding::learn_re_sequences(&seqs, cmd.re_steps, cmd.gamma)?
        };
        seqs = if cmd.flat {
            let codec = encoding::ReCodec::new(&learned.table);
            seqs.iter().map(|s| codec.encode(s)).collect()
        } else {
            learned.encoded.clone()
        };
        io::save_merges(&learned.table, table_path(&cmd.re_table, ".re.merges"))?;
        eprintln!(
            "re: {} rules in {} steps, converged={}, max transition {}",
            learned.table.len(),
            learned.steps.len(),
            learned.converged,
            learned.final_max
        );
    }
    io::write_sequences(out_path, &seqs)?;
    Ok(())
}

fn generate_cmd(cmd: &Generate, seed: u64, out: &Output) -> Result<()> {
    let model = io::load_model(&cmd.model)?;
    let ids = experiments::generate_corpus(&model, &cmd.transform, &cmd.generation.config(seed))?;
    let tokens = experiments::ids_to_tokens(&model, &ids);
    match out.format_or(Format::Csv) {
        Format::Json => out.emit_json(&tokens),
        Format::Csv => {
            let mut text = String::new();
            for s in &tokens {
                text.push_str(&s.join(" "));
                text.push('\n');
            }
            out.emit(&text)
        }
    }
}

fn score_cmd(cmd: &Score, out: &Output) -> Result<()> {
    let seqs = io::ingest(&cmd.sequences, false, None)?.sequences;
    let aggregation = if cmd.micro { RepNAggregation::Micro } else { RepNAggregation::Macro };
    let mut report = metrics::repetition_report(&seqs, cmd.window, &cmd.orders, aggregation)?;
    if cmd.ppl_c {
        let (Some(model), Some(reference)) = (&cmd.model, &cmd.reference) else {
            bail!("--ppl-c needs --model and --reference");
        };
        let model = io::load_model(model)?;
        let reference = io::ingest(reference, false, None)?.sequences;
        report.ppl_c = Some(metrics::ppl_c_markov(&model, &seqs, &reference)?);
    }
    match out.format_or(Format::Json) {
        Format::Json => out.emit_json(&report),
        Format::Csv => {
            let mut text = String::from("sequence,len,rep_w,rep_r");
            for n in &cmd.orders {
                text.push_str(&format!(",rep_{n}"));
            }
            text.push('\n');
            for (k, s) in report.per_sequence.iter().enumerate() {
                text.push_str(&format!("{k},{},{},{}", s.len, s.rep_w, s.rep_r));
                for n in &cmd.orders {
                    let v = s.rep_n.get(n).copied().flatten();
                    text.push_str(&format!(",{}", v.map(|v| v.to_string()).unwrap_or_default()));
                }
                text.push('\n');
            }
            out.emit(&text)
        }
    }
}

fn correlation_cmd(cmd: &ExpCorrelation, seed: u64, out: &Output) -> Result<()> {
    if let Some(t) = cmd.temperatures.iter().find(|&&t| t.is_nan() || t <= 0.0) {
        bail!("temperatures must be positive, got {t}");
    }
    let model = io::load_model(&cmd.model)?;
    let cfg = CorrelationConfig { generation: cmd.generation.config(seed), window: cmd.window, ..Default::default() };
    let rows = experiments::correlation_sweep(&model, &cmd.temperatures, &cfg)?;
    match out.format_or(Format::Csv) {
        Format::Json => out.emit_json(&rows),
        Format::Csv => out.emit(&experiments::correlation_csv(&rows)),
    }
}

fn inflow_cmd(cmd: &ExpInflow, seed: u64, out: &Output) -> Result<()> {
    let model = io::load_model(&cmd.model)?;
    let ids = match &cmd.generated {
        Some(path) => {
            let seqs = io::ingest(path, false, None)?.sequences;
            seqs.iter().map(|s| model.vocab().encode(s)).collect::<arplab::Result<Vec<_>>>()?
        }
        None => experiments::generate_corpus(&model, &cmd.transform, &cmd.generation.config(seed))?,
    };
    let rows = experiments::inflow_rows(&model, cmd.gamma, &ids, cmd.window, cmd.order)?;
    match out.format_or(Format::Csv) {
        Format::Json => out.emit_json(&json!({
            "gamma": cmd.gamma,
            "rows": rows,
            "groups": experiments::group_by_pair_count(&rows),
        })),
        Format::Csv => out.emit(&experiments::inflow_csv(&rows)),
    }
}

fn concentration_cmd(cmd: &ExpConcentration, seed: u64, out: &Output) -> Result<()> {
    let model: TransitionModel = match &cmd.model {
        Some(path) => io::load_model(path)?,
        None => perturb::synthetic_chain(cmd.synthetic_n, cmd.branching, cmd.row_mass, seed)?,
    };
    let n = model.n();
    let delta = cmd.delta.unwrap_or_else(|| (0.5 / n as f64).sqrt());
    let distribution = match cmd.distribution {
        Distribution::Uniform => PerturbationDistribution::UniformSymmetric,
        Distribution::TwoPoint => PerturbationDistribution::TwoPoint,
    };
    let spec = PerturbationSpec::new(delta, distribution);
    let result = perturb::concentration_experiment(
        &model.b_dense(),
        model.zeta(),
        &spec,
        &cmd.a_grid,
        cmd.trials,
        cmd.depth,
        seed,
    )
    .map_err(|e| match e {
        arplab::Error::PreconditionViolated(arplab::Precondition::BranchingTooLow { .. }) => {
            anyhow::Error::new(e).context("use a denser chain, e.g. a synthetic one with --branching 5 or more")
        }
        e => e.into(),
    })?;
    match out.format_or(Format::Csv) {
        Format::Json => out.emit_json(&result),
        Format::Csv => {
            let mut text = String::from("a,empirical_prob,theory_bound,trials\n");
            for ((a, e), t) in result.a_grid.iter().zip(&result.empirical_prob).zip(&result.theory_bound) {
                text.push_str(&format!("{a},{e},{t},{}\n", result.trials));
            }
            out.emit(&text)
        }
    }
}

fn re_cmd(cmd: &ExpRe, seed: u64, out: &Output) -> Result<()> {
    let seqs = load_corpus(&cmd.corpus)?;
    let cfg = ReEffectConfig {
        gamma: cmd.gamma,
        n_steps: cmd.re_steps,
        temperature: cmd.temperature,
        generation: cmd.generation.config(seed),
        window: cmd.window,
    };
    let (effect, learned) = experiments::re_effect(&seqs, &cfg)?;
    match out.format_or(Format::Json) {
        Format::Json => out.emit_json(&json!({ "effect": effect, "steps": learned.steps })),
        Format::Csv => {
            let mut text = String::from("side,vocab,zeta_n,max_transition,denominator,rep_w,rep_2,rep_r\n");
            for (name, s) in [("before", &effect.before), ("after", &effect.after)] {
                text.push_str(&format!(
                    "{name},{},{},{},{},{},{},{}\n",
                    s.vocab, s.zeta_n, s.max_transition, s.denominator, s.rep_w, s.rep_2, s.rep_r
                ));
            }
            out.emit(&text)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = Output { path: cli.out, format: cli.format };
    let seed = cli.seed;
    match &cli.command {
        Command::BuildModel(c) => build_model_cmd(c, &out),
        Command::Arp(c) => arp_cmd(c, &out),
        Command::Encode(c) => encode_cmd(c, &out),
        Command::Generate(c) => generate_cmd(c, seed, &out),
        Command::Score(c) => score_cmd(c, &out),
        Command::ExpCorrelation(c) => correlation_cmd(c, seed, &out),
        Command::ExpInflow(c) => inflow_cmd(c, seed, &out),
        Command::ExpConcentration(c) => concentration_cmd(c, seed, &out),
        Command::ExpRe(c) => re_cmd(c, seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
