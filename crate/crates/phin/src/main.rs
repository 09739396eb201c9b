use clap::Parser;

fn main() {
    let cli = phin::cli::Cli::parse();
    if let Err(e) = phin::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
