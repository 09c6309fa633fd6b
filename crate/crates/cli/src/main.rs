use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use btb_core::engine::Simulation;
use btb_core::oracle::{run_fine, steady_state, OracleConfig};
use btb_core::output::{compare, plot_script, read_csv, summary_text, CsvWriter, PlotLayout};
use btb_core::{parse_scenario, OutputRow, Scenario};

const EXIT_USAGE: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

/// Phasor-domain simulator for a back-to-back converter linking a grid and a microgrid.
#[derive(Parser)]
#[command(name = "btbsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the log as CSV.
    Run(RunArgs),
    /// Write a matplotlib script that plots a CSV log.
    Plot(PlotArgs),
    /// Parse and validate a scenario file.
    Check {
        scenario: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Step size in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// End time in seconds.
    #[arg(long)]
    t_stop: Option<f64>,
    /// CSV destination. Defaults to stdout unless --compare or --summary is given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log every Nth step.
    #[arg(long)]
    stride: Option<usize>,
    /// Use the fine-step RK4 reference integrator instead of the phasor engine.
    #[arg(long, conflicts_with = "compare")]
    oracle: bool,
    /// Run both integrators and print a deviation report.
    #[arg(long)]
    compare: bool,
    /// Print final values and v_dc settling times.
    #[arg(long)]
    summary: bool,
    /// --compare fails (exit 4) above this max |v_dc| deviation [V].
    /// Default is 0.5% of the v_dc reference.
    #[arg(long)]
    max_dv_dc: Option<f64>,
    /// --compare fails (exit 4) above this RMS power deviation [W].
    #[arg(long, default_value_t = 500.0)]
    max_power_rms: f64,
    /// Settling band around the v_dc reference for --summary [V].
    #[arg(long, default_value_t = 1.0)]
    band: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Auto,
    DcCurrents,
    Powers,
}

#[derive(clap::Args)]
struct PlotArgs {
    csv: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Auto)]
    layout: Layout,
    /// Script destination. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image the script saves. Defaults to the CSV path with a .png extension.
    #[arg(long)]
    image: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Plot(args) => plot(&args),
        Command::Check { scenario } => check(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("btbsim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let s = parse_scenario(path).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    for w in s.warnings() {
        eprintln!("btbsim: warning: {w}");
    }
    Ok(s)
}

fn check(path: &Path) -> Result<(), Failure> {
    let s = load(path)?;
    println!(
        "{}: ok, {} events, {} steps of {} s",
        path.display(),
        s.events.len(),
        s.simulation.n_steps(),
        s.simulation.dt
    );
    Ok(())
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let mut s = load(&args.scenario)?;
    if let Some(dt) = args.dt {
        s.simulation.dt = dt;
    }
    if let Some(t) = args.t_stop {
        s.simulation.t_stop = t;
    }
    if let Some(n) = args.stride {
        s.simulation.log_stride = n;
    }
    s.validate().map_err(|e| fail(EXIT_USAGE, e))?;
    let oracle_config = OracleConfig {
        dt_fine: OracleConfig::default().dt_fine.min(s.simulation.dt / 10.0),
    };

    let csv_to_stdout = args.out.is_none() && !args.compare && !args.summary;
    let mut csv: Option<CsvWriter<Box<dyn Write>>> = match (&args.out, csv_to_stdout) {
        (Some(p), _) => {
            let f = File::create(p).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", p.display())))?;
            Some(CsvWriter::new(Box::new(BufWriter::new(f)) as Box<dyn Write>).map_err(io_fail)?)
        }
        (None, true) => Some(CsvWriter::new(Box::new(BufWriter::new(io::stdout().lock())) as Box<dyn Write>).map_err(io_fail)?),
        (None, false) => None,
    };

    let rows = if args.oracle {
        let result = run_fine(&s, &oracle_config);
        let rows = match result {
            Ok(trace) => trace.rows,
            Err(e) => return Err(fail(EXIT_MODEL, format!("oracle: {e}"))),
        };
        if let Some(w) = csv.as_mut() {
            for r in &rows {
                w.write_row(r).map_err(io_fail)?;
            }
            w.flush().map_err(io_fail)?;
        }
        rows
    } else {
        let mut sim = Simulation::new(&s).map_err(|e| fail(EXIT_MODEL, format!("initialization: {e}")))?;
        let mut rows: Vec<OutputRow> = Vec::new();
        let mut write_err: Option<io::Error> = None;
        let keep = args.compare || args.summary;
        let result = sim.run_with(|r| {
            if let (Some(w), None) = (csv.as_mut(), &write_err) {
                if let Err(e) = w.write_row(r) {
                    write_err = Some(e);
                }
            }
            if keep {
                rows.push(*r);
            }
        });
        if let Some(w) = csv.as_mut() {
            w.flush().map_err(io_fail)?;
        }
        if let Some(e) = write_err {
            return Err(io_fail(e));
        }
        if let Err(e) = result {
            let logged = csv.as_ref().map(|w| w.rows()).unwrap_or(rows.len());
            return Err(fail(
                EXIT_MODEL,
                format!("t = {} s: {e} ({logged} rows written before the failure)", sim.time()),
            ));
        }
        rows
    };
    drop(csv);

    if args.summary {
        print_summary(&s, &rows, args.band)?;
    }
    if args.compare {
        let reference = run_fine(&s, &oracle_config).map_err(|e| fail(EXIT_MODEL, format!("oracle: {e}")))?;
        let report = compare(&reference.rows, &rows).map_err(|e| fail(EXIT_MODEL, format!("compare: {e}")))?;
        println!("deviation of the phasor engine from the RK4 oracle (dt_fine = {} s)", oracle_config.dt_fine);
        print!("{}", report.to_text());
        let max_dv = args.max_dv_dc.unwrap_or(0.005 * s.control.v_dc_ref);
        let dv = report.column("v_dc").max_abs;
        let worst_power = ["p_g", "q_g", "p_m", "q_m"]
            .iter()
            .map(|c| report.column(c).rms)
            .fold(0.0, f64::max);
        if dv > max_dv || worst_power > args.max_power_rms {
            return Err(fail(
                EXIT_THRESHOLD,
                format!(
                    "comparison threshold exceeded: max |dv_dc| = {dv:.4} V (limit {max_dv} V), worst power RMS = {worst_power:.3} W (limit {} W)",
                    args.max_power_rms
                ),
            ));
        }
        println!("within thresholds: max |dv_dc| <= {max_dv} V, power RMS <= {} W", args.max_power_rms);
    }
    Ok(())
}

fn print_summary(s: &Scenario, rows: &[OutputRow], band: f64) -> Result<(), Failure> {
    let event_times: Vec<f64> = s.events.iter().map(|e| e.time).collect();
    print!("{}", summary_text(rows, &event_times, s.control.v_dc_ref, band));
    // Steady state for the setpoints left in force after the last event.
    match steady_state(&s.final_setpoints()) {
        Ok(ss) => {
            let o = ss.outputs;
            println!("steady-state solver for the final setpoints:");
            println!("  v_dc     = {:.6}", o.v_dc);
            println!("  p_g      = {:.6}", o.p_g);
            println!("  p_m      = {:.6}", o.p_m);
            println!("  i_dc_g   = {:.6}", o.i_dc_g);
            println!("  i_dc_m   = {:.6}", o.i_dc_m);
        }
        Err(e) => println!("steady-state solver: {e}"),
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), Failure> {
    let f = File::open(&args.csv).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", args.csv.display())))?;
    let rows = read_csv(BufReader::new(f)).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", args.csv.display())))?;
    if rows.is_empty() {
        return Err(fail(EXIT_PARSE, format!("{}: no data rows", args.csv.display())));
    }
    let layout = match args.layout {
        Layout::Auto => PlotLayout::detect(&rows),
        Layout::DcCurrents => PlotLayout::DcCurrents,
        Layout::Powers => PlotLayout::Powers,
    };
    let image = args.image.clone().unwrap_or_else(|| args.csv.with_extension("png"));
    let script = plot_script(&args.csv.to_string_lossy(), layout, &image.to_string_lossy());
    match &args.out {
        Some(p) => std::fs::write(p, script).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", p.display())))?,
        None => print!("{script}"),
    }
    Ok(())
}

fn io_fail(e: io::Error) -> Failure {
    fail(EXIT_USAGE, format!("write failed: {e}"))
}
