fn main() {
    std::process::exit(eit_cli::run());
}
