fn main() {
    std::process::exit(localpar::cli::run());
}
