fn main() {
    std::process::exit(depthfuzz::cli::main_with_args(std::env::args_os()));
}
