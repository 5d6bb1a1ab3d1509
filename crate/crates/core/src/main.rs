fn main() {
    std::process::exit(starsim::cli::main());
}
