fn main() {
    std::process::exit(iagan_core::cli::run_cli(std::env::args_os()));
}
