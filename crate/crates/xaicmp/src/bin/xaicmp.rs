fn main() {
    std::process::exit(xaicmp::cli::run())
}
