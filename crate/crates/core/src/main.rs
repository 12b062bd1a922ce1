fn main() {
    std::process::exit(polyverify::cli::main_with_args(std::env::args()));
}
