use clap::Parser;

fn main() {
    let cli = ocfsl_cli::Cli::parse();
    if let Err(err) = ocfsl_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(ocfsl_cli::exit_code(&err));
    }
}
