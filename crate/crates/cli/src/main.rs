use clap::Parser;

fn main() {
    let cli = ssnav_cli::Cli::parse();
    match ssnav_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
