use std::process::ExitCode;

fn main() -> ExitCode {
    match affordance_bayes::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(usage) = err.downcast_ref::<clap::Error>() {
                usage.exit();
            }
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
