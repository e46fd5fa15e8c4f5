use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(slbr::cli::run(std::env::args_os()) as u8)
}
