use std::process::ExitCode;

fn main() -> ExitCode {
    attnlego_workbench::cli::main_with_args(std::env::args_os())
}
