use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlab_cli::diff::diff_reports;
use qlab_cli::pipeline::exit_code;
use qlab_cli::scenario::{Scenario, BUILTIN};
use qlab_cli::{exit, CliError, Report, RunOptions};

#[derive(Parser)]
#[command(name = "qlab", version, about = "Numerical checks for conformal metrics with prescribed Q-curvature")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (a TOML file or a built-in name).
    Run {
        config: String,
        /// Treat soft regressions as failures.
        #[arg(long)]
        strict: bool,
        /// Output directory [default: qlab-out/<scenario>].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the built-in scenarios.
    List,
    /// Compare the fitted constants and checks of two reports.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Relative tolerance band for constants.
        #[arg(long, default_value_t = 0.2)]
        band: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    let code = match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qlab: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn dispatch(cmd: Cmd) -> Result<i32, CliError> {
    match cmd {
        Cmd::Run { config, strict, out, threads } => {
            if let Some(n) = threads {
                if n == 0 {
                    return Err(CliError::Config("--threads must be positive".into()));
                }
                // a second initialisation only fails when already set
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let (sc, text) = Scenario::load(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from("qlab-out").join(&sc.name));
            let mut opts = RunOptions::new(&out).with_env_seed()?;
            opts.strict = strict;
            let report = qlab_cli::run(&sc, &text, &opts)?;
            print_summary(&report, &out);
            Ok(exit_code(&report, strict))
        }
        Cmd::List => {
            println!("{:<10} {:>3} {:>5} {:>5}  {:<52} description", "name", "n", "L", "m", "stages");
            for (name, _) in BUILTIN {
                let s = Scenario::builtin(name)?;
                let stages: Vec<&str> = s.plan().iter().map(|s| s.name()).collect();
                println!(
                    "{:<10} {:>3} {:>5} {:>5}  {:<52} {}",
                    s.name,
                    s.dim,
                    s.grid.halfwidth,
                    s.grid.resolution,
                    stages.join(","),
                    s.description
                );
            }
            Ok(exit::OK)
        }
        Cmd::Diff { a, b, band } => {
            let (ra, rb) = (Report::load(&a)?, Report::load(&b)?);
            let d = diff_reports(&ra, &rb, band);
            print!("{}", d.render());
            Ok(if d.regressions() > 0 { exit::DIFF_REGRESSION } else { exit::OK })
        }
    }
}

fn print_summary(r: &Report, out: &std::path::Path) {
    let m = &r.metadata;
    println!(
        "{} (n={}, L={}, m={}, seed {} from {})",
        m.scenario, m.grid.dim, m.grid.halfwidth, m.grid.resolution, m.seeds.master, m.seeds.source
    );
    for f in &r.flags {
        println!("  flag: {f}");
    }
    for c in r.failed() {
        println!("  FAIL [{:?}] {}/{}: {} ({:?})", c.severity, c.stage, c.name, c.detail, c.value);
    }
    println!(
        "{} checks, {} hard failures, {} soft failures; report in {}",
        r.checks.len(),
        r.outcome.hard_failures,
        r.outcome.soft_failures,
        out.join("report.json").display()
    );
}
