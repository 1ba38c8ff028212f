fn main() {
    std::process::exit(selfctl::cli::run_from(std::env::args_os()));
}
