use std::process::ExitCode;

use lorafwi_cli::cli::{one_line, run_from_args, UsageError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run_from_args(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                if !clap_err.use_stderr() {
                    // --help and --version
                    print!("{clap_err}");
                    return ExitCode::SUCCESS;
                }
                let first = clap_err.render().to_string();
                let line = first.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
                eprintln!("error: usage: {line}");
                return ExitCode::from(2);
            }
            let msg = one_line(&e);
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("error: usage: {msg}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}
