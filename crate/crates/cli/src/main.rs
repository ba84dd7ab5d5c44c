use clap::Parser;

fn main() {
    let cli = vstb_cli::Cli::parse();
    if let Err(e) = vstb_cli::run(cli) {
        eprintln!("{}", vstb_cli::error_line(&e));
        std::process::exit(1);
    }
}
