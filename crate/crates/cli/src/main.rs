fn main() {
    std::process::exit(sdelab_cli::main_entry());
}
