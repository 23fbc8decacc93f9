use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(dpanet_cli::run(std::env::args_os()))
}
