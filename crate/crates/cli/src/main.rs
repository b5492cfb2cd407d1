use std::process::ExitCode;

fn main() -> ExitCode {
    cjepa_cli::main_with(std::env::args_os())
}
