use clap::Parser;

fn main() {
    let cli = audioctx_harness::Cli::parse();
    if let Err(e) = audioctx_harness::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
