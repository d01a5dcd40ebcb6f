fn main() {
    std::process::exit(dmpcrl::cli::main());
}
