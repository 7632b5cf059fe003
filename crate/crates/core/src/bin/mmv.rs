use std::process::ExitCode;

fn main() -> ExitCode {
    mmv_core::cli::main()
}
