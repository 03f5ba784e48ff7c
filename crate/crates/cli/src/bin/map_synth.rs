use std::process::ExitCode;

use satloc_cli::{main_with, run_map_synth, MapSynthCli};

fn main() -> ExitCode {
    main_with::<MapSynthCli, _, _>(std::env::args_os(), run_map_synth)
}
