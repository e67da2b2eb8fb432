use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use svdkf::filters::svd_kf_run;
use svdkf::model::{
    init_factors, load_model_config, satellite_model, ModelConfig, SATELLITE_DEFAULT_Q1,
};
use svdkf_cli::{example1, gradcheck, sweep};

/// Factored Kalman filtering, filter sensitivities, and maximum-likelihood
/// estimation: benchmarks and diagnostics.
#[derive(Parser)]
#[command(name = "svdkf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the worked factor-derivative walkthrough report
    Example1 {
        /// Write the report to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimation study over a conditioning sweep
    Sweep(SweepArgs),
    /// Compare analytic likelihood gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated conditioning parameters, e.g. 1e-1,1e-2,1e-3
    #[arg(long, value_delimiter = ',')]
    delta_list: Option<Vec<f64>>,
    /// Monte Carlo runs per delta
    #[arg(long)]
    runs: Option<usize>,
    /// Measurement steps per run
    #[arg(long)]
    steps: Option<usize>,
    /// True parameter used to simulate the data
    #[arg(long)]
    theta_true: Option<f64>,
    /// Optimizer starting point
    #[arg(long)]
    theta0: Option<f64>,
    /// Base seed; run r uses seed base+r
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods: diff_kf, diff_svd_kf
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Process-noise intensity of the satellite model
    #[arg(long)]
    q1: Option<f64>,
    /// Write the summary CSV here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Desk-scale run: 30 runs, deltas down to 1e-7
    #[arg(long)]
    quick: bool,
    /// TOML config file mirroring the sweep settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the optimizer iteration history of run 0 of every
    /// (method, delta) cell here
    #[arg(long)]
    opt_trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Built-in `satellite` or a path to a model TOML file
    #[arg(long, default_value = "satellite")]
    model: String,
    /// Conditioning parameter for the built-in satellite model
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Parameter point, comma-separated for multi-parameter models
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// Measurement steps to simulate
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Write the per-step filter trace CSV here
    #[arg(long)]
    filter_trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Example1 { out } => {
            let report = example1::report()?;
            match out {
                Some(path) => fs::write(path, report)?,
                None => print!("{report}"),
            }
        }
        Command::Sweep(args) => run_sweep_command(args)?,
        Command::Gradcheck(args) => run_gradcheck_command(args)?,
    }
    Ok(())
}

fn run_sweep_command(args: SweepArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut config = match &args.config {
        Some(path) => sweep::parse_sweep_config(&fs::read_to_string(path)?)?,
        None => sweep::SweepConfig::default(),
    };
    if let Some(d) = args.delta_list {
        config.deltas = d;
    }
    if let Some(v) = args.runs {
        config.runs = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.theta_true {
        config.theta_true = v;
    }
    if let Some(v) = args.theta0 {
        config.theta0 = v;
    }
    if let Some(v) = args.seed {
        config.base_seed = v;
    }
    if let Some(v) = args.methods {
        config.methods = v
            .iter()
            .map(|s| sweep::parse_method(s))
            .collect::<svdkf::Result<_>>()?;
    }
    if let Some(v) = args.q1 {
        config.q1 = v;
    }
    if args.quick {
        config = config.quick();
    }

    let summary = sweep::run_sweep(&config)?;
    print!("{}", summary.human_report());
    if let Some(path) = args.out {
        fs::write(&path, summary.to_csv())?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = args.opt_trace {
        let mut combined = String::new();
        for &delta in &config.deltas {
            for &method in &config.methods {
                combined.push_str(&format!("# method={method} delta={delta:e} run=0\n"));
                combined.push_str(&sweep::optimizer_trace_csv(&config, method, delta, 0)?);
            }
        }
        fs::write(&path, combined)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn resolve_model(name: &str, delta: f64) -> Result<ModelConfig, Box<dyn std::error::Error>> {
    if name == "satellite" {
        Ok(ModelConfig {
            model: satellite_model(delta, SATELLITE_DEFAULT_Q1),
            theta_star: Some(DVector::from_vec(vec![5.0])),
        })
    } else {
        Ok(load_model_config(name.as_ref())?)
    }
}

fn run_gradcheck_command(args: GradcheckArgs) -> Result<(), Box<dyn std::error::Error>> {
    let resolved = resolve_model(&args.model, args.delta)?;
    let theta = match args.theta {
        Some(v) => DVector::from_vec(v),
        None => resolved
            .theta_star
            .clone()
            .ok_or("model config has no theta_star; pass --theta")?,
    };
    let (report, data) = gradcheck::run_gradcheck(&resolved.model, &theta, args.steps, args.seed, args.h)?;
    print!("{}", gradcheck::render(&report));
    if let Some(path) = args.filter_trace {
        let inst = resolved.model.evaluate(&theta)?;
        let fac = init_factors(&inst, resolved.model.factor_supply())?;
        let trace = svd_kf_run(&inst, &fac, &data)?;
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        fs::write(&path, buf)?;
        println!("wrote {}", path.display());
    }
    if report.pass {
        Ok(())
    } else {
        Err("gradient check failed".into())
    }
}
