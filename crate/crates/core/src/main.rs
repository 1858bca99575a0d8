use clap::Parser;
use protocheck::cli::{dispatch, Cli, EXIT_CONFIG, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap's own usage code (2) would read as a partial run
            std::process::exit(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    std::process::exit(dispatch(&cli));
}
