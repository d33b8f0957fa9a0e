fn main() {
    std::process::exit(blowfly_core::cli::main());
}
