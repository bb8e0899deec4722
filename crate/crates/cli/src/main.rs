use clap::Parser;
use synreg_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(cli, &mut stdout) {
        eprintln!("synreg: {e}");
        std::process::exit(e.exit_code());
    }
}
