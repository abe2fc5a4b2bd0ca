fn main() {
    std::process::exit(drift::cli::run_cli(std::env::args()));
}
