use std::process::ExitCode;

use satloc_cli::{main_with, run_satloc, SatlocCli};

fn main() -> ExitCode {
    main_with::<SatlocCli, _, _>(std::env::args_os(), run_satloc)
}
