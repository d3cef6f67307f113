fn main() {
    std::process::exit(slens::cli::main());
}
