mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hlq_core::backprop::{acbp_header, acbp_unpack, acbp_verify, stored_projection, AcbpHeader, BackwardStrategy};
use hlq_core::costmodel::{memory_footprint, parse_catalog, reduction_percent, CostReport};
use hlq_core::harness::{ablation, ablation_grid, grad_check, quant_error_study, train, GradCheckConfig, ModelSpec, TrainConfig};
use hlq_core::HlqError;
use serde::Serialize;

use config::{strategy_with, Config, ConfigError, DataSection, Overrides};

#[derive(Parser, Debug)]
#[command(name = "hlq", version, about = "Hadamard low-rank quantized backpropagation experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every report is written inside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    bits_gx: Option<u8>,
    #[arg(long, global = true)]
    bits_gw: Option<u8>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    block: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and write per-epoch metrics.
    Train,
    /// Run the gradient-path sensitivity grid over the configured seeds.
    Ablation,
    /// Finite-difference check of the vanilla path and strategy fidelity.
    Gradcheck,
    /// Analytic FLOPs, BoPS and memory for a layer catalog.
    Cost {
        /// Layer catalog; overrides `cost.catalog`.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Quantization error with and without the Hadamard transform on log-normal gradients.
    QuantError,
    /// Inspect activation containers.
    Acbp {
        #[command(subcommand)]
        action: AcbpAction,
    },
}

#[derive(Subcommand, Debug)]
enum AcbpAction {
    /// Print header fields.
    Inspect { path: PathBuf },
    /// Write the dequantized stored tensor as JSON into the output directory.
    Dump { path: PathBuf },
    /// Check structure, payload bounds and checksum.
    Verify { path: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<HlqError> for Failure {
    fn from(e: HlqError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = cli.global;
    let ov = Overrides {
        seed: g.seed,
        out: g.out,
        strategy: g.strategy,
        bits_gx: g.bits_gx,
        bits_gw: g.bits_gw,
        rank: g.rank,
        block: g.block,
    };
    let cfg = Config::load(g.config.as_deref(), &ov)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Ablation => cmd_ablation(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Cost { catalog } => cmd_cost(&cfg, catalog.as_deref()),
        Command::QuantError => cmd_quant_error(&cfg),
        Command::Acbp { action } => cmd_acbp(&cfg, action),
    }
}

/// Writes `name` inside the output directory.
fn write_report(out: &Path, name: &str, contents: &str) -> CmdResult {
    debug_assert!(!name.contains('/') && !name.contains('\\'));
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let p = out.join(name);
    std::fs::write(&p, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct FinalMetrics {
    train_loss: f64,
    train_acc: f64,
    val_loss: f64,
    val_acc: f64,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    command: &'static str,
    seed: u64,
    seed_overridden: bool,
    strategy: String,
    strategy_config: &'a BackwardStrategy,
    train: &'a TrainConfig,
    model: &'a ModelSpec,
    data: &'a DataSection,
    param_count: usize,
    epochs: usize,
    final_metrics: FinalMetrics,
}

fn cmd_train(cfg: &Config) -> CmdResult {
    let strategy = cfg.build_strategy()?;
    let tc = cfg.train_config();
    tc.validate().map_err(|e| Failure::Config(format!("train: {e}")))?;
    let spec = cfg.model();
    let (train_set, val_set) = cfg.datasets()?;
    let outcome = train(&spec, &tc, &strategy, &train_set, &val_set)?;
    let last = outcome
        .history
        .epochs
        .last()
        .ok_or_else(|| Failure::Runtime("training produced no epochs".into()))?;
    let summary = TrainSummary {
        command: "train",
        seed: tc.seed,
        seed_overridden: cfg.seed_overridden,
        strategy: strategy.name(),
        strategy_config: &strategy,
        train: &tc,
        model: &spec,
        data: &cfg.file.data,
        param_count: outcome.model.param_count(),
        epochs: outcome.history.epochs.len(),
        final_metrics: FinalMetrics {
            train_loss: last.train_loss,
            train_acc: last.train_acc,
            val_loss: last.val_loss,
            val_acc: last.val_acc,
        },
    };
    write_report(&cfg.out, "metrics.jsonl", &outcome.history.to_jsonl())?;
    write_report(&cfg.out, "summary.json", &json(&summary))?;
    println!(
        "{}: val_acc {:.2} after {} epochs ({})",
        summary.strategy,
        last.val_acc,
        summary.epochs,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationEntry {
    g_i: String,
    g_w: String,
    strategy: String,
    seeds: Vec<u64>,
    accuracies: Vec<f64>,
    mean: f64,
    std: f64,
}

fn cmd_ablation(cfg: &Config) -> CmdResult {
    let tc = cfg.train_config();
    tc.validate().map_err(|e| Failure::Config(format!("train: {e}")))?;
    let seeds = match cfg.seed {
        Some(s) if cfg.seed_overridden => vec![s],
        _ => cfg.file.ablation.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(Failure::Config("ablation.seeds is empty".into()));
    }
    let rank = cfg.strategy.rank.unwrap_or(cfg.file.ablation.rank);
    let mut rows = ablation_grid(rank);
    rows.push(("HLQ".into(), "HLQ".into(), strategy_with("hlq", &cfg.strategy)?));
    for (_, _, s) in &rows {
        s.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    let (train_set, val_set) = cfg.datasets()?;
    let result = ablation(&cfg.model(), &tc, &rows, &seeds, &train_set, &val_set, cfg.threads)?;
    let entries: Vec<AblationEntry> = result
        .into_iter()
        .map(|r| AblationEntry {
            g_i: r.g_i,
            g_w: r.g_w,
            strategy: r.strategy.name(),
            seeds: r.seeds,
            accuracies: r.accuracies,
            mean: r.mean,
            std: r.std,
        })
        .collect();
    let mut csv = String::from("g_i,g_w,strategy,mean,std");
    for s in &seeds {
        csv.push_str(&format!(",seed_{s}"));
    }
    csv.push('\n');
    for e in &entries {
        csv.push_str(&format!("{},{},{},{:.4},{:.4}", e.g_i, e.g_w, e.strategy, e.mean, e.std));
        for a in &e.accuracies {
            csv.push_str(&format!(",{a:.4}"));
        }
        csv.push('\n');
        println!("{:>10} / {:<10} {:6.2} ± {:.2}", e.g_i, e.g_w, e.mean, e.std);
    }
    write_report(&cfg.out, "ablation.json", &json(&entries))?;
    write_report(&cfg.out, "ablation.csv", &csv)
}

fn cmd_gradcheck(cfg: &Config) -> CmdResult {
    let sec = &cfg.file.gradcheck;
    let strategies: Vec<BackwardStrategy> = match &cfg.strategy_flag {
        Some(name) => vec![strategy_with(name, &cfg.strategy)?],
        None => sec
            .strategies
            .iter()
            .map(|n| strategy_with(n, &cfg.strategy))
            .collect::<Result<_, _>>()?,
    };
    let base = cfg.seed.unwrap_or(0);
    let gc = GradCheckConfig {
        fd_batch: sec.fd_batch,
        max_entries: sec.max_entries,
        step: sec.step,
        batch: sec.batch,
        seeds: (base..base + sec.batches as u64).collect(),
        bias_trials: sec.bias_trials,
    };
    let (train_set, _) = cfg.datasets()?;
    let report = grad_check(&cfg.model(), &train_set, &strategies, &gc)?;
    println!("vanilla max relative error vs finite differences: {:.3e}", report.vanilla_max_rel_err);
    for s in &report.strategies {
        println!(
            "{}: cosine mean {:.4} min {:.4}, relative bias {:.4}",
            s.strategy, s.cosine_mean, s.cosine_min, s.relative_bias
        );
    }
    write_report(&cfg.out, "gradcheck.json", &json(&report))
}

#[derive(Serialize)]
struct CostSummary<'a> {
    reports: &'a [CostReport],
    /// Activation memory reduction of each strategy against vanilla, percent.
    activation_reduction_percent: Vec<(String, f64)>,
}

fn cmd_cost(cfg: &Config, flag: Option<&Path>) -> CmdResult {
    let path = cfg
        .catalog_path(flag)
        .ok_or_else(|| Failure::Config("cost needs a layer catalog (--catalog or cost.catalog)".into()))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Config(format!("cannot read catalog {}: {e}", path.display())))?;
    let layers = parse_catalog(&text).map_err(|e| Failure::Config(format!("catalog {}: {e}", path.display())))?;
    let names: Vec<String> = match cfg.strategy_flag.clone() {
        Some(n) => vec![n],
        None => cfg.file.cost.strategies.clone(),
    };
    let batch = cfg.file.cost.batch;
    let baseline = memory_footprint(&layers, &BackwardStrategy::vanilla(), batch)?;
    let mut reports = Vec::with_capacity(names.len());
    for n in &names {
        let s = strategy_with(n, &cfg.strategy)?;
        reports.push(memory_footprint(&layers, &s, batch)?);
    }
    let reduction = reports
        .iter()
        .map(|r| (r.strategy.clone(), reduction_percent(r, &baseline)))
        .collect();
    for r in &reports {
        write_report(&cfg.out, &format!("cost_{}.csv", r.strategy), &r.to_csv())?;
        println!(
            "{}: backward flops {} (+{} overhead), backward bops {}, activation bytes {}",
            r.strategy,
            r.totals.vanilla_flops,
            r.totals.overhead_flops,
            r.totals.backward_bops,
            r.totals.activation_bytes
        );
    }
    write_report(
        &cfg.out,
        "cost.json",
        &json(&CostSummary {
            reports: &reports,
            activation_reduction_percent: reduction,
        }),
    )
}

fn cmd_quant_error(cfg: &Config) -> CmdResult {
    let mut qc = cfg.file.quant_error.clone();
    if let Some(s) = cfg.seed {
        qc.seed = s;
    }
    if let Some(b) = cfg.strategy.bits_gx {
        qc.bits = b;
    }
    if let Some(b) = cfg.strategy.block {
        qc.block = b;
    }
    let report = quant_error_study(&qc)?;
    println!(
        "HT wins: product {}/{}, tensor {}/{}",
        report.product_wins, report.trials, report.tensor_wins, report.trials
    );
    let mut csv = String::from("series,lower,upper,count\n");
    for (name, h) in [("raw", &report.histogram_raw), ("ht", &report.histogram_ht)] {
        for (k, c) in h.counts.iter().enumerate() {
            csv.push_str(&format!("{name},{},{},{c}\n", h.edges[k], h.edges[k + 1]));
        }
    }
    write_report(&cfg.out, "quant_error.json", &json(&report))?;
    write_report(&cfg.out, "histograms.csv", &csv)
}

fn read_container(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn print_header(h: &AcbpHeader) {
    println!("version={}", h.version);
    println!("bits={}", h.bits);
    println!("n={}", h.block);
    println!("rank={}", h.rank);
    println!("basis_bitmap=0x{:04x}", h.basis_bitmap);
    println!("dims={:?}", h.dims);
    println!("num_scales={}", h.num_scales);
    println!("payload_offset={}", h.payload_offset);
    println!("payload_bytes={}", h.payload_len);
    println!("crc32=0x{:08x}", h.crc32);
}

#[derive(Serialize)]
struct Dump {
    header: AcbpHeader,
    axis: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn cmd_acbp(cfg: &Config, action: AcbpAction) -> CmdResult {
    match action {
        AcbpAction::Inspect { path } => {
            let h = acbp_header(&read_container(&path)?)?;
            print_header(&h);
        }
        AcbpAction::Verify { path } => {
            let h = acbp_verify(&read_container(&path)?)?;
            println!("ok: {} payload bytes, crc32=0x{:08x}", h.payload_len, h.crc32);
        }
        AcbpAction::Dump { path } => {
            let bytes = read_container(&path)?;
            let header = acbp_verify(&bytes)?;
            let act = acbp_unpack(&bytes)?;
            let t = stored_projection(&act)?;
            let stem = path.file_stem().map_or_else(|| "acbp".into(), |s| s.to_string_lossy().into_owned());
            let name = format!("{stem}.dump.json");
            let dump = Dump {
                header,
                axis: format!("{:?}", act.axis()).to_lowercase(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            };
            write_report(&cfg.out, &name, &json(&dump))?;
            println!("wrote {}", cfg.out.join(name).display());
        }
    }
    Ok(())
}
