fn main() {
    std::process::exit(apar::cli::run_from(std::env::args_os()));
}
