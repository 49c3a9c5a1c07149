use clap::Parser;

fn main() {
    let cli = ssoct::cli::Cli::parse();
    if let Err(e) = ssoct::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
