use clap::Parser;

use lfab::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LFAB_LOG", "error")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = run(&cli, &mut out) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
