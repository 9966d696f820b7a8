use clap::Parser;

fn main() {
    let cli = coex_cli::Cli::parse();
    if let Err(e) = coex_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
