fn main() {
    std::process::exit(vecforge::cli::run(std::env::args()));
}
