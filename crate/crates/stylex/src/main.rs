fn main() {
    std::process::exit(stylex::cli::run());
}
