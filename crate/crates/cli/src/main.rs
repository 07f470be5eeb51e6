use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedprune::checkpoint::load_checkpoint;
use fedprune::experiment::{
    pooled_std, read_k_sweep, run, sweep_clients, sweep_k, write_run, ExperimentConfig, RunMode, DEFAULT_KS,
};
use fedprune::metrics::{MetricsLedger, DEFAULT_ELEM_BYTES};
use fedprune::nn::{count_flops, count_params, Family};
use fedprune::plot::{emit_plots, k_sweep_chart};
use fedprune::Error;

/// Federated learning with server-side automatic filter pruning.
#[derive(Parser)]
#[command(name = "fedprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: search stage, then training stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip the search stage and train the unpruned model for this many rounds.
        #[arg(long)]
        baseline_rounds: Option<usize>,
    },
    /// One run per pruning strength k.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
        ks: Vec<f64>,
    },
    /// Search-stage runs over per-round client counts and seeds.
    SweepClients {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Render SVG charts from ledgers (and optionally a k-sweep summary).
    Plot {
        /// Ledger files; series are named after their parent directory.
        ledgers: Vec<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long, short, default_value = "plots")]
        out: PathBuf,
    },
    /// Print a checkpoint's architecture and sizes.
    InspectCheckpoint { path: PathBuf },
}

/// Config file plus per-key overrides.
#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    fraction: Option<f64>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stage1_cap: Option<usize>,
    #[arg(long)]
    stage2_rounds: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    k: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_filters: Option<usize>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    kernel: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            clients => federation.clients,
            fraction => federation.fraction,
            epochs => federation.epochs,
            batch_size => federation.batch_size,
            stage1_cap => federation.stage1_cap,
            stage2_rounds => federation.stage2_rounds,
            lr => optimizer.lr,
            k => pruning.k,
            patience => pruning.patience,
            min_filters => pruning.min_filters,
            family => model.family,
            kernel => model.kernel,
        );
        if self.clients_per_round.is_some() {
            cfg.federation.clients_per_round = self.clients_per_round;
        }
        if self.widths.is_some() {
            cfg.model.widths = self.widths.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn series_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { common, baseline_rounds } => {
            let cfg = common.config()?;
            let mode = baseline_rounds.map_or(RunMode::Pruned, |rounds| RunMode::Baseline { rounds });
            let res = run(&cfg, mode)?;
            let meta = write_run(&common.out, &cfg, mode, &res)?;
            println!(
                "rounds {}+{} params {} -> {} best accuracy {:.4} bytes {} -> {}",
                meta.stage1_rounds,
                meta.stage2_rounds,
                meta.initial_params,
                meta.final_params,
                meta.best_accuracy,
                meta.cumulative_bytes,
                common.out.display()
            );
        }
        Command::SweepK { common, ks } => {
            let cfg = common.config()?;
            let entries = sweep_k(&cfg, &ks, Some(&common.out))?;
            for e in &entries {
                println!(
                    "k {} snapshot {} -> {} final params {} best accuracy {:.4} search rounds {}",
                    e.k, e.snapshot_params, e.snapshot_retained, e.final_params, e.best_accuracy, e.stage1_rounds
                );
            }
        }
        Command::SweepClients { common, counts, seeds } => {
            if counts.iter().any(|&c| c == 0) {
                return Err(Error::Config("client counts must be at least 1".into()));
            }
            let cfg = common.config()?;
            let entries = sweep_clients(&cfg, &counts, seeds, Some(&common.out))?;
            for e in &entries {
                println!("clients {} mean params {:.1} std {:.1}", e.clients_per_round, e.mean, e.std);
            }
            println!("pooled std {:.1}", pooled_std(&entries));
        }
        Command::Plot { ledgers, sweep, out } => {
            if ledgers.is_empty() && sweep.is_none() {
                return Err(Error::Config("nothing to plot".into()));
            }
            if !ledgers.is_empty() {
                let loaded = ledgers
                    .iter()
                    .map(|p| Ok((series_name(p), MetricsLedger::load(p, DEFAULT_ELEM_BYTES)?)))
                    .collect::<Result<Vec<_>, Error>>()?;
                for f in emit_plots(&loaded, &out)? {
                    println!("{}", f.display());
                }
            }
            if let Some(s) = sweep {
                let svg = k_sweep_chart(&read_k_sweep(&s)?)?;
                std::fs::create_dir_all(&out)?;
                let path = out.join("k_sweep.svg");
                std::fs::write(&path, svg)?;
                println!("{}", path.display());
            }
        }
        Command::InspectCheckpoint { path } => {
            let model = load_checkpoint(&path)?;
            println!("family {}", model.family);
            println!("input {:?} classes {}", model.input_shape, model.classes);
            println!("params {}", count_params(&model));
            println!("flops {}", count_flops(&model)?.total());
            for (name, n) in model.filter_counts() {
                println!("{name} {n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
