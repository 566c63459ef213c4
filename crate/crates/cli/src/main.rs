use clap::Parser;
use elastoreg_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => println!("{}", manifest.display()),
        Err(e) => {
            eprintln!("elastoreg: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
