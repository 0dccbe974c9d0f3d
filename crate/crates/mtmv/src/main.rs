use clap::Parser;

fn main() {
    let cli = mtmv::cli::Cli::parse();
    if let Err(e) = mtmv::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
