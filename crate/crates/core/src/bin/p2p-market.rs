use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use p2p_market::report::{EXIT_INVALID, EXIT_OK};
use p2p_market::{run_pipeline, validate_instance, Error, MarketInstance, PipelineConfig, Provenance, Stage};

#[derive(Parser)]
#[command(name = "p2p-market", version, about = "Clear a bilateral P2P electricity market and negotiate fair contract prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an instance file against every market rule.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Matrix, optimal matching and core allocations.
    Clear(RunArgs),
    /// `clear` plus the bilateral negotiation of every matched pair.
    Negotiate(RunArgs),
    /// `negotiate` plus the comparison with grid-only trading.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound on every negotiation weight.
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    family_size: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    /// Allocation used for the grid comparison (default: all).
    #[arg(long, value_enum)]
    allocation: Option<AllocationArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocationArg {
    Tau,
    BuyerOpt,
    SellerOpt,
    Negotiated,
}

impl From<AllocationArg> for Provenance {
    fn from(a: AllocationArg) -> Self {
        match a {
            AllocationArg::Tau => Provenance::Tau,
            AllocationArg::BuyerOpt => Provenance::BuyerOptimal,
            AllocationArg::SellerOpt => Provenance::SellerOptimal,
            AllocationArg::Negotiated => Provenance::Negotiated,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { input } => validate(&input),
        Command::Clear(args) => run(args, Stage::Clear),
        Command::Negotiate(args) => run(args, Stage::Negotiate),
        Command::Report(args) => run(args, Stage::Report),
    };
    ExitCode::from(code as u8)
}

fn validate(input: &PathBuf) -> i32 {
    match MarketInstance::from_path(input) {
        Ok(instance) => {
            let violations = validate_instance(&instance);
            if violations.is_empty() {
                println!("{}: valid", input.display());
                EXIT_OK
            } else {
                for v in &violations {
                    println!("{v}");
                }
                EXIT_INVALID
            }
        }
        Err(e) => report_error(&e),
    }
}

fn run(args: RunArgs, stage: Stage) -> i32 {
    let config = PipelineConfig {
        stage,
        seed: args.seed,
        gamma: args.gamma,
        family_size: args.family_size,
        tol: args.tol,
        max_iters: args.max_iters,
        allocation: args.allocation.map(Into::into),
    };
    match run_pipeline(&args.input, &args.out, &config) {
        Ok(outcome) => {
            let r = &outcome.report;
            println!("grand coalition value: {}", r.grand_value);
            for m in &r.matches {
                println!("  {} <- {}  value {}  {} kWh", m.buyer, m.seller, m.value, m.quantity_kwh);
            }
            for n in &r.negotiations {
                let status = if n.converged { "converged" } else { "NOT converged" };
                println!("  negotiation {}: {status} after {} rounds", n.pair_id(), n.iterations);
            }
            for note in &r.notes {
                println!("note: {note}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            outcome.exit_code
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Parse(_) | Error::Invalid(_) | Error::UnknownAgent { .. } => EXIT_INVALID,
        Error::Config(_) => EXIT_INVALID,
        _ => 1,
    }
}
