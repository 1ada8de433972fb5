use clap::Parser;
use kdselect_service::cli::{execute, Cli};

fn main() -> std::process::ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
