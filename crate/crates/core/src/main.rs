fn main() {
    std::process::exit(evpool::cli::main());
}
