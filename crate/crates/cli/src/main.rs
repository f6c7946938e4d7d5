use std::process::exit;

fn main() {
    exit(commscale_cli::run(std::env::args_os()));
}
