fn main() {
    std::process::exit(seqlabel::cli::main_with_args(std::env::args().collect()));
}
