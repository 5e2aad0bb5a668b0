fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SEGVIT_LOG", "warn")).init();
    let code = segvit::cli::run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
