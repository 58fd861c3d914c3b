use std::process::ExitCode;

fn main() -> ExitCode {
    gelfand_smp_cli::main_with_args(std::env::args_os())
}
