use clap::Parser;
use shotflow_cli::{exit_code_for, run, Cli};

fn main() {
    // clap exits with code 2 and usage text on unknown flags or malformed
    // invocations, matching the usage-error contract.
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code_for(&err));
    }
}
