use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = ffsnn_cli::Cli::parse();
    let result = ffsnn_cli::init_threads().and_then(|_| ffsnn_cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(ffsnn_cli::exit_code(&e));
    }
}
