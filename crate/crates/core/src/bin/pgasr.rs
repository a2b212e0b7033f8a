use std::process::ExitCode;

fn main() -> ExitCode {
    pgasr::cli::run(std::env::args_os())
}
