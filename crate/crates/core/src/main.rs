use clap::Parser;

use valign::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            for (name, path) in &manifest.artifacts {
                println!("{name}: {}", path.display());
            }
        }
        Err(err) => {
            eprintln!("valign: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
