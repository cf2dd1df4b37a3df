use std::process::exit;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    exit(secateur::cli::cli_main(&args));
}
