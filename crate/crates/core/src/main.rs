use clap::Parser;

fn main() {
    let cli = latentview::cli::Cli::parse();
    if let Err(e) = latentview::cli::run(cli) {
        eprintln!("latentview: error: {e}");
        std::process::exit(1);
    }
}
