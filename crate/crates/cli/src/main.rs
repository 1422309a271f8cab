mod args;
mod commands;
mod config;
mod data;
mod error;

use clap::Parser;

use crate::args::Cli;
use crate::error::CliError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            fail(&CliError::Usage(e.render().to_string().trim().to_string()));
        }
    };
    let result = cli.resolve().and_then(|config| commands::run(&cli.command, &config));
    if let Err(e) = result {
        fail(&e);
    }
}

fn fail(e: &CliError) -> ! {
    eprintln!("{}", e.to_json());
    std::process::exit(e.exit_code());
}
