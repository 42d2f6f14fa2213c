fn main() {
    std::process::exit(hallu_weak::cli::main());
}
