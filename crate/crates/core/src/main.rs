fn main() {
    std::process::exit(rouser::cli::main_entry());
}
