use std::process::ExitCode;

fn main() -> ExitCode {
    fdlab::cli::main()
}
