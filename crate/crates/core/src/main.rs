fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMT_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(mmt::cli::main_with_args(std::env::args_os()));
}
