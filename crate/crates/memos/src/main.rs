use clap::Parser;
use memos::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli::run(&cli) {
        Ok(out) => println!("{}", serde_json::to_string_pretty(&out).expect("output serializes")),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(1);
        }
    }
}
