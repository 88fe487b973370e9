use std::process::ExitCode;

fn main() -> ExitCode {
    clustergen::cli::main_with_args(std::env::args_os())
}
