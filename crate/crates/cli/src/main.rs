use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use scalekv::classifier::{classify, collect_variances};
use scalekv::compression::{PolicyConfig, PolicyKind, QueryStrategy};
use scalekv::harness::config::{BudgetConfig, ClassificationSource, MaskConfig, MaskTarget};
use scalekv::harness::{mask_heads, metrics_csv, retention_compare, run, sweep, RunConfig};
use scalekv::model::ExecMode;
use scalekv::oracle::{budgeted_flops, vanilla_flops};
use scalekv::seed::derive_seed;
use scalekv::{build_schedule, Error};

#[derive(Parser)]
#[command(
    name = "scalekv",
    version,
    about = "Head-aware KV cache compression for next-scale attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate on uncompressed runs and write a head classification file.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        /// Fraction of all heads classified contextual.
        #[arg(long, default_value_t = 0.5)]
        contextual_fraction: f64,
        /// Number of calibration runs.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Generate once under the configured policy.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compression sensitivity by head type, or scale-retention comparison.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SweepKind::Sensitivity)]
        kind: SweepKind,
        /// Compression ratios for the sensitivity sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 0.7, 0.9])]
        ratios: Vec<f64>,
    },
    /// Zero a fraction of one head type and compare against the unmasked run.
    Mask {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-step score-product counts from the closed-form oracle.
    Flops {
        #[arg(short)]
        a: u64,
        #[arg(short = 'K', long = "scales")]
        scales: usize,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 32)]
        n_obs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Sensitivity,
    Retention,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    HeadAware,
    Positional,
    ScoreTopK,
    TopKMerge,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    Uniform,
    Random,
    Init,
    Recent,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Contextual,
    Structural,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; replaces every other config flag except `--seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the input and chaining noise.
    #[arg(long)]
    seed: u64,
    #[arg(short, default_value_t = 2)]
    a: u64,
    #[arg(short = 'K', long = "scales", default_value_t = 4)]
    scales: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    /// Defaults to heads * head_dim.
    #[arg(long)]
    model_dim: Option<usize>,
    /// Seed of the model weights; defaults to `--seed`.
    #[arg(long)]
    model_seed: Option<u64>,
    /// Plant every head: this fraction vertical, the rest multi-diagonal.
    #[arg(long)]
    planted_fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::None)]
    policy: PolicyArg,
    /// Average per-head budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Fix the contextual budget directly.
    #[arg(long)]
    contextual_budget: Option<usize>,
    /// Structural to contextual budget ratio.
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    /// Contextual fraction used in the budget split.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 32)]
    n_obs: usize,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long, value_enum, default_value_t = QueryArg::Uniform)]
    query_strategy: QueryArg,
    /// Do not merge evicted tokens at the final step.
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    classification: Option<PathBuf>,
    #[arg(long, value_enum)]
    mask_type: Option<MaskArg>,
    #[arg(long, default_value_t = 0.1)]
    mask_fraction: f64,
    /// Count operations without evaluating attention.
    #[arg(long)]
    count_only: bool,
    /// Skip the uncompressed reference run.
    #[arg(long)]
    no_reference: bool,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    attention_maps: bool,
}

impl RunArgs {
    fn to_config(&self) -> anyhow::Result<RunConfig> {
        if let Some(path) = &self.config {
            let mut c = RunConfig::load(path)?;
            c.seed = self.seed;
            return Ok(c);
        }
        let mut c = RunConfig::new(
            self.a,
            self.scales,
            self.layers,
            self.heads,
            self.head_dim,
            self.seed,
        );
        if let Some(d) = self.model_dim {
            c.model.model_dim = d;
        }
        c.model.seed = self.model_seed.unwrap_or(self.seed);
        c.model.planted_fraction = self.planted_fraction;
        c.policy = PolicyConfig {
            kind: match self.policy {
                PolicyArg::HeadAware => PolicyKind::HeadAware,
                PolicyArg::Positional => PolicyKind::Positional,
                PolicyArg::ScoreTopK => PolicyKind::ScoreTopK,
                PolicyArg::TopKMerge => PolicyKind::TopKMerge,
                PolicyArg::None => PolicyKind::None,
            },
            n_obs: self.n_obs,
            n_init: self.n_init,
            merge_final_step: !self.no_merge,
            query_strategy: match self.query_strategy {
                QueryArg::Uniform => QueryStrategy::Uniform,
                QueryArg::Random => QueryStrategy::Random,
                QueryArg::Init => QueryStrategy::Init,
                QueryArg::Recent => QueryStrategy::Recent,
                QueryArg::Full => QueryStrategy::Full,
            },
        };
        c.budget = self.budget.map(|average| BudgetConfig {
            average,
            contextual: self.contextual_budget,
            ratio: self.ratio,
            alpha: self.alpha,
        });
        c.classification = self.classification.clone().map(ClassificationSource::Path);
        c.masking = self.mask_type.map(|t| MaskConfig {
            head_type: match t {
                MaskArg::Contextual => MaskTarget::Contextual,
                MaskArg::Structural => MaskTarget::Structural,
                MaskArg::All => MaskTarget::All,
            },
            fraction: self.mask_fraction,
        });
        if self.count_only {
            c.mode = ExecMode::CountOnly;
        }
        c.compare_reference = !self.no_reference;
        c.outputs.trace = self.trace.clone();
        c.outputs.metrics = self.metrics.clone();
        c.outputs.attention_maps = self.attention_maps;
        Ok(c)
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Classify {
            run: args,
            contextual_fraction,
            samples,
            output,
        } => {
            let config = args.to_config()?;
            let schedule = config.schedule()?;
            let model = config.build_model(&schedule)?;
            let seeds: Vec<u64> = (0..samples as u64)
                .map(|i| derive_seed(config.seed, &[i]))
                .collect();
            let c = classify(
                &collect_variances(&model, &schedule, &seeds)?,
                contextual_fraction,
            )?;
            c.save(&output)?;
            for (l, layer) in c.layers.iter().enumerate() {
                eprintln!(
                    "layer {l}: contextual {:?} structural {:?}",
                    layer.contextual, layer.structural
                );
            }
        }
        Command::Run { run: args } => {
            let config = args.to_config()?;
            let out = run(&config)?;
            if config.outputs.metrics.is_none() {
                print!("{}", metrics_csv(std::slice::from_ref(&out.metrics))?);
            }
        }
        Command::Sweep {
            run: args,
            kind,
            ratios,
        } => {
            let config = args.to_config()?;
            let rows = match kind {
                SweepKind::Sensitivity => sweep(&config, &ratios)?,
                SweepKind::Retention => retention_compare(&config)?,
            };
            let metrics: Vec<_> = rows.into_iter().map(|r| r.metrics).collect();
            write_or_print(config.outputs.metrics.as_ref(), &metrics_csv(&metrics)?)?;
        }
        Command::Mask { run: args } => {
            let config = args.to_config()?;
            let report = mask_heads(&config)?;
            eprintln!("masked {} heads", report.masked.len());
            write_or_print(
                config.outputs.metrics.as_ref(),
                &metrics_csv(std::slice::from_ref(&report.metrics))?,
            )?;
        }
        Command::Flops {
            a,
            scales,
            budget,
            n_obs,
        } => {
            let schedule = build_schedule(a, scales)?;
            let vanilla = vanilla_flops(a, scales)?;
            let budgeted_report = budget
                .map(|b| budgeted_flops(a, scales, b, n_obs))
                .transpose()?;
            println!("k,tokens,cumulative,vanilla,budgeted");
            for k in 1..=scales {
                let budgeted = budgeted_report
                    .as_ref()
                    .map_or(String::new(), |h| h.per_step[k - 1].to_string());
                println!(
                    "{k},{},{},{},{budgeted}",
                    schedule.tokens(k),
                    schedule.cumulative(k),
                    vanilla.per_step[k - 1]
                );
            }
            let budgeted = budgeted_report
                .as_ref()
                .map_or(String::new(), |h| h.total.to_string());
            println!(
                "total,,{},{},{budgeted}",
                schedule.total_tokens(),
                vanilla.total
            );
            if let Some(h) = budgeted_report {
                eprintln!(
                    "bound {} overhead {} first compressed step {:?}",
                    h.bound.unwrap_or(0),
                    h.overhead,
                    h.first_compressed_step
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(3, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
