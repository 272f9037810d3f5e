fn main() {
    std::process::exit(protonorm::cli::main());
}
