use clap::Parser;

use pluris::cli::{run, CliArgs, EXIT_OK};

fn main() {
    let args = CliArgs::parse();
    let outcome = run(&args);
    if outcome.exit_code == EXIT_OK {
        println!("{}", outcome.message);
        if let Some(path) = &outcome.log_path {
            println!("run log: {}", path.display());
        }
    } else {
        eprintln!("{}", outcome.message);
        if let Some(path) = &outcome.log_path {
            eprintln!("run log: {}", path.display());
        }
    }
    std::process::exit(outcome.exit_code);
}
