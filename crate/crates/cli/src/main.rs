use clap::Parser;

fn main() {
    let cli = pgseg_cli::Cli::parse();
    if let Err(e) = pgseg_cli::run(cli) {
        eprintln!("error: {}", e.one_line());
        std::process::exit(e.exit_code());
    }
}
