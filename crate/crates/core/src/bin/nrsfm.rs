fn main() {
    std::process::exit(nrsfm::cli::main_with_args(std::env::args_os()));
}
