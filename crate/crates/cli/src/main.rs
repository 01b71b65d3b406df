use clap::Parser;

fn main() {
    let cli = buffet_cli::Cli::parse();
    match buffet_cli::run(cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
