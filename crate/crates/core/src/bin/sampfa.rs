fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAMPFA_LOG", "warn")).init();
    std::process::exit(sampfa::cli::run(std::env::args_os()));
}
