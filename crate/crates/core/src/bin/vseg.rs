use clap::Parser;
use vesselseg::cli::{run, RunArgs};

fn main() {
    let args = RunArgs::parse();
    match run(&args) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("vseg: {}", e.to_string().replace('\n', " "));
            std::process::exit(1);
        }
    }
}
