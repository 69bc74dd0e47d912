fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVB_LOG", "warn")).init();
    let code = evb_core::cli::main_with(std::env::args().collect(), std::env::vars().collect());
    std::process::exit(code);
}
