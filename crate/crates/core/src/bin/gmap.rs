use std::process::ExitCode;

fn main() -> ExitCode {
    gmap::cli::main_with(std::env::args_os())
}
