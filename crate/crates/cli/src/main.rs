use clap::Parser;

fn main() {
    let cli = cait_cli::Cli::parse();
    match cait_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::exit(f.code);
        }
    }
}
