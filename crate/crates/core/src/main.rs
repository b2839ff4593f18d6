use std::io;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut input = io::stdin().lock();
    let mut output = io::stdout().lock();
    std::process::exit(groundchat::cli::main_with_args(std::env::args_os(), &mut input, &mut output));
}
