use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semcon_core::clients::ClientId;
use semcon_core::config::{SessionConfig, StrategyName};
use semcon_core::consensus::ClusterParams;
use semcon_core::costmodel::{
    comparison_report, lora_upload_bytes, sc_total_bytes, subsample_bytes, ByteSize, LoraCostSpec, LoraTargets,
    ModelPreset, ScCostSpec, SubsampleCostSpec,
};
use semcon_core::encoder::{EmbeddingSource, EncoderConfig, ExternalEmbeddings, HashingEncoder, RawEmbedding};
use semcon_core::privacy::{ledgers_from_csv, LedgerTotal};
use semcon_core::protocol::{prompt_consensus, ResponseRecord};
use semcon_core::read_jsonl;
use semcon_core::theory::{delta_t, stationarity_rhs, GapParams, StationarityParams};

#[derive(Parser)]
#[command(name = "semcon", version, about = "Semantic-consensus co-training simulator and calculators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured multi-round session and write per-round transcripts.
    Simulate(SimulateArgs),
    /// Build consensus pseudo-labels from a JSONL file of responses.
    Consensus(ConsensusArgs),
    /// Communication cost of consensus, LoRA and subsampled parameter exchange.
    Cost(CostArgs),
    /// Evaluate the public-gradient gap and, optionally, the stationarity bound.
    Bound(BoundArgs),
    /// Compose per-round privacy budgets from a CSV of client,round,epsilon,delta.
    Privacy(PrivacyArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the thread count in the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ConsensusArgs {
    /// Rows of {"prompt_id", "client_id", "response", "embedding"?}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    #[arg(long, default_value_t = 2)]
    min_pts: usize,
    #[arg(long, default_value = "centroid")]
    strategy: StrategyName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 384)]
    dimension: usize,
    #[arg(long, default_value_t = 3)]
    ngram: usize,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    collapse_whitespace: bool,
}

#[derive(Args)]
struct CostArgs {
    /// Model geometry preset: llama2-13b or llama3.1-405b.
    #[arg(long, conflicts_with_all = ["sc", "layers", "subsample"])]
    preset: Option<String>,
    /// Adapter targets for a preset (qv or attn_mlp); both when omitted.
    #[arg(long, requires = "preset")]
    targets: Option<LoraTargets>,
    /// Semantic-consensus traffic only.
    #[arg(long, conflicts_with_all = ["layers", "subsample"])]
    sc: bool,
    /// Explicit adapted matrices as DINxDOUT, comma separated, e.g. 4096x4096,4096x11008.
    #[arg(long, value_delimiter = ',', conflicts_with = "subsample")]
    layers: Vec<String>,
    /// Parameter subsampling with `--fraction` and `--params`.
    #[arg(long)]
    subsample: bool,
    #[arg(long = "K", default_value_t = 10)]
    clients: u64,
    #[arg(long = "M", default_value_t = 1024)]
    prompts: u64,
    /// Average generated tokens per response.
    #[arg(long, default_value_t = 128.0)]
    tokens: f64,
    /// Bytes per token.
    #[arg(long, default_value_t = 2.0)]
    bpt: f64,
    #[arg(long)]
    upload_only: bool,
    #[arg(long, default_value_t = 32)]
    rank: u64,
    /// Bytes per parameter.
    #[arg(long, default_value_t = 2.0)]
    bpp: f64,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    params: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 1.0)]
    grad_bound: f64,
    #[arg(long, default_value_t = 0.0)]
    kl_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 64)]
    public_batch: u64,
    #[arg(long, default_value_t = 1)]
    param_dim: u64,
    #[arg(long, default_value_t = 100)]
    total_steps: u64,
    #[arg(long, default_value_t = 0.05)]
    confidence: f64,
    /// With `--step`, also evaluate the stationarity bound.
    #[arg(long, requires = "step")]
    smoothness: Option<f64>,
    #[arg(long, requires = "smoothness")]
    step: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise_var: f64,
    #[arg(long, default_value_t = 0.0)]
    heterogeneity: f64,
    #[arg(long, default_value_t = 0.0)]
    init_gap: f64,
}

#[derive(Args)]
struct PrivacyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Serialize)]
struct Report {
    command: &'static str,
    inputs: Value,
    outputs: Value,
    version: &'static str,
    seed: Option<u64>,
}

impl Report {
    fn new(command: &'static str, inputs: Value, outputs: Value, seed: Option<u64>) -> Self {
        Self {
            command,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION"),
            seed,
        }
    }
}

enum Output {
    Json(Report),
    Csv(Vec<u8>),
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn simulate(a: SimulateArgs) -> Result<Output> {
    let mut cfg = SessionConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    let summary = semcon_core::simulate(&cfg, &a.output)?;
    if summary.errors > 0 {
        eprintln!("{} per-prompt errors recorded; see the round transcripts", summary.errors);
    }
    Ok(Output::Json(Report::new(
        "simulate",
        json!({ "config": a.config, "output": a.output, "seed": a.seed, "threads": a.threads }),
        serde_json::to_value(&summary)?,
        Some(cfg.seed),
    )))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsensusRow {
    prompt_id: String,
    client_id: u32,
    response: String,
    #[serde(default)]
    embedding: Option<RawEmbedding>,
}

fn consensus(a: ConsensusArgs) -> Result<Output> {
    let rows: Vec<ConsensusRow> = read_jsonl(&a.input)?;
    let with_embedding = rows.iter().filter(|r| r.embedding.is_some()).count();
    if with_embedding != 0 && with_embedding != rows.len() {
        bail!("either every row or no row must carry an embedding ({with_embedding} of {} do)", rows.len());
    }
    let encoder_cfg = EncoderConfig {
        dimension: a.dimension,
        ngram_size: a.ngram,
        seed: a.encoder_seed,
        lowercase: a.lowercase,
        collapse_whitespace: a.collapse_whitespace,
    };
    let cluster = ClusterParams::new(a.eps, a.min_pts)?;

    // Prompts in order of first appearance, responses ordered by client.
    let mut order: Vec<String> = Vec::new();
    let mut by_prompt: BTreeMap<String, BTreeMap<ClientId, ResponseRecord>> = BTreeMap::new();
    let mut external = Vec::new();
    for row in rows {
        let id = ClientId(row.client_id);
        let rec = ResponseRecord::new(id, row.prompt_id.clone(), row.response);
        if let Some(e) = row.embedding {
            external.push((rec.response_id(0), e));
        }
        let entry = by_prompt.entry(row.prompt_id.clone()).or_insert_with(|| {
            order.push(row.prompt_id.clone());
            BTreeMap::new()
        });
        if entry.insert(id, rec).is_some() {
            bail!("client {id} answers prompt {:?} more than once", row.prompt_id);
        }
    }
    let encoder: Box<dyn EmbeddingSource> = if with_embedding > 0 {
        let dim = external[0].1.dimension();
        Box::new(ExternalEmbeddings::new(dim, external)?)
    } else {
        Box::new(HashingEncoder::new(encoder_cfg.clone())?)
    };
    let strategy = a.strategy.with_seed(a.seed);
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (j, prompt_id) in order.iter().enumerate() {
        let responses: Vec<&ResponseRecord> = by_prompt[prompt_id].values().collect();
        let (result, errs) = prompt_consensus(
            prompt_id,
            &responses,
            encoder.as_ref(),
            &cluster,
            strategy.for_prompt(0, j),
            0,
        );
        results.extend(result);
        errors.extend(errs);
    }
    for e in &errors {
        eprintln!("prompt {}: {}", e.prompt_id, e.reason);
    }
    Ok(Output::Json(Report::new(
        "consensus",
        json!({
            "input": a.input,
            "eps": a.eps,
            "min_pts": a.min_pts,
            "strategy": strategy,
            "encoder": if with_embedding > 0 { Value::String("external".into()) } else { serde_json::to_value(&encoder_cfg)? },
        }),
        json!({ "results": results, "errors": errors }),
        Some(a.seed),
    )))
}

#[derive(Serialize)]
struct CostRow {
    quantity: String,
    bytes: u64,
    mb: f64,
    mib: f64,
}

impl CostRow {
    fn new(quantity: impl Into<String>, size: ByteSize) -> Self {
        Self {
            quantity: quantity.into(),
            bytes: size.bytes,
            mb: size.mb,
            mib: size.mib,
        }
    }
}

fn parse_layers(specs: &[String]) -> Result<Vec<(u64, u64)>> {
    specs
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once('x')
                .with_context(|| format!("layer {s:?} is not of the form DINxDOUT"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn cost(a: CostArgs) -> Result<Output> {
    let sc = ScCostSpec {
        clients: a.clients,
        prompts: a.prompts,
        avg_tokens: a.tokens,
        bytes_per_token: a.bpt,
        include_download: !a.upload_only,
    };
    let (inputs, outputs, rows) = if let Some(name) = &a.preset {
        let preset = ModelPreset::by_name(name)?;
        let targets: Vec<LoraTargets> = a.targets.map_or_else(|| LoraTargets::ALL.to_vec(), |t| vec![t]);
        let mut rows = Vec::new();
        let mut uploads = Vec::new();
        for t in &targets {
            let spec = preset.lora_spec(*t, a.rank, a.bpp, a.clients);
            let per_client = ByteSize::from(lora_upload_bytes(&spec, true)?);
            let all = ByteSize::from(lora_upload_bytes(&spec, false)?);
            rows.push(CostRow::new(format!("lora_{}_upload_per_client", t.name()), per_client));
            rows.push(CostRow::new(format!("lora_{}_upload_all_clients", t.name()), all));
            uploads.push(json!({
                "targets": t,
                "params_per_client": spec.param_count(),
                "upload_per_client": per_client,
                "upload_all_clients": all,
            }));
        }
        let comparison = comparison_report(&preset, &sc, a.rank, a.bpp)?;
        rows.push(CostRow::new("sc_total", comparison.sc_total));
        (
            json!({ "preset": preset, "targets": targets, "rank": a.rank, "bytes_per_param": a.bpp, "sc": sc }),
            json!({ "lora": uploads, "comparison": comparison }),
            rows,
        )
    } else if !a.layers.is_empty() {
        let spec = LoraCostSpec {
            layers: parse_layers(&a.layers)?,
            rank: a.rank,
            bytes_per_param: a.bpp,
            clients: a.clients,
        };
        let per_client = ByteSize::from(lora_upload_bytes(&spec, true)?);
        let all = ByteSize::from(lora_upload_bytes(&spec, false)?);
        (
            json!({ "layers": spec.layers, "rank": a.rank, "bytes_per_param": a.bpp, "clients": a.clients }),
            json!({ "params_per_client": spec.param_count(), "upload_per_client": per_client, "upload_all_clients": all }),
            vec![
                CostRow::new("lora_upload_per_client", per_client),
                CostRow::new("lora_upload_all_clients", all),
            ],
        )
    } else if a.subsample {
        let spec = SubsampleCostSpec {
            clients: a.clients,
            fraction: a.fraction.context("--subsample needs --fraction")?,
            param_count: a.params.context("--subsample needs --params")?,
            bytes_per_param: a.bpp,
        };
        let total = ByteSize::from(subsample_bytes(&spec)?);
        (
            serde_json::to_value(spec)?,
            json!({ "upload_all_clients": total }),
            vec![CostRow::new("subsample_upload_all_clients", total)],
        )
    } else if a.sc {
        let total = ByteSize::from(sc_total_bytes(&sc)?);
        (
            serde_json::to_value(sc)?,
            json!({ "sc_total": total }),
            vec![CostRow::new("sc_total", total)],
        )
    } else {
        bail!("choose one of --preset, --sc, --layers or --subsample");
    };
    Ok(match a.format {
        Format::Json => Output::Json(Report::new("cost", inputs, outputs, None)),
        Format::Csv => Output::Csv(csv_bytes(&rows)?),
    })
}

fn bound(a: BoundArgs) -> Result<Output> {
    let gap = GapParams {
        grad_bound: a.grad_bound,
        kl_shift: a.kl_shift,
        label_noise: a.label_noise,
        public_batch: a.public_batch,
        param_dim: a.param_dim,
        total_steps: a.total_steps,
        confidence: a.confidence,
    };
    let delta = delta_t(&gap)?;
    let (inputs, outputs) = match (a.smoothness, a.step) {
        (Some(smoothness), Some(step)) => {
            let p = StationarityParams {
                gap,
                smoothness,
                step,
                noise_var: a.noise_var,
                heterogeneity: a.heterogeneity,
                init_gap: a.init_gap,
            };
            let rhs = stationarity_rhs(&p)?;
            (serde_json::to_value(p)?, json!({ "delta": delta, "stationarity": rhs }))
        }
        _ => (serde_json::to_value(gap)?, json!({ "delta": delta })),
    };
    Ok(Output::Json(Report::new("bound", inputs, outputs, None)))
}

fn privacy(a: PrivacyArgs) -> Result<Output> {
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let ledgers = ledgers_from_csv(file)?;
    let totals: Vec<LedgerTotal> = ledgers.iter().map(LedgerTotal::from).collect();
    for t in totals.iter().filter(|t| t.delta_vacuous) {
        eprintln!("client {}: composed delta {} is vacuous", t.client, t.delta);
    }
    let (epsilon, delta) = totals
        .iter()
        .fold((0.0, 0.0), |(e, d), t| (f64::max(e, t.epsilon), f64::max(d, t.delta)));
    Ok(match a.format {
        Format::Json => Output::Json(Report::new(
            "privacy",
            json!({ "input": a.input }),
            json!({ "clients": totals, "worst_epsilon": epsilon, "worst_delta": delta }),
            None,
        )),
        Format::Csv => Output::Csv(csv_bytes(&totals)?),
    })
}

fn run(cli: Cli) -> Result<Output> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Consensus(a) => consensus(a),
        Command::Cost(a) => cost(a),
        Command::Bound(a) => bound(a),
        Command::Privacy(a) => privacy(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli).and_then(|out| {
        let mut stdout = io::stdout().lock();
        match out {
            Output::Json(report) => {
                serde_json::to_writer_pretty(&mut stdout, &report)?;
                writeln!(stdout)?;
            }
            Output::Csv(bytes) => stdout.write_all(&bytes)?,
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
