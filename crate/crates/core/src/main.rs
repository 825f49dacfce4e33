fn main() {
    std::process::exit(plce::cli::run());
}
