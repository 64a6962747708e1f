use clap::Parser;

fn main() {
    let cli = psrn::cli::Cli::parse();
    match psrn::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
}
