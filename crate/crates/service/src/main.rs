fn main() {
    std::process::exit(haptex_service::cli::run(std::env::args_os()));
}
