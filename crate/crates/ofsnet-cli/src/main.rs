use std::process::ExitCode;

fn main() -> ExitCode {
    ofsnet_cli::run()
}
