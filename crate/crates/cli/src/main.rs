use clap::Parser;

fn main() {
    let cli = par_cli::args::Cli::parse();
    match par_cli::commands::run(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(par_cli::exit_code(&e));
        }
    }
}
