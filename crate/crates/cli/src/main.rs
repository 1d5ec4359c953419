use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vizprompt_cli::run(std::env::args_os()))
}
