fn main() {
    std::process::exit(kveff::cli::main());
}
