use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(msanet::cli::run(std::env::args()) as u8)
}
