use clap::Parser;

fn main() {
    let cli = perihom_cli::Cli::parse();
    if let Err(err) = perihom_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(perihom_cli::exit_code(&err));
    }
}
