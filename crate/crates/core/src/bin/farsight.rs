fn main() {
    std::process::exit(farsight::cli::run());
}
