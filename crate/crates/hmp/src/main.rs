fn main() {
    std::process::exit(hmp::cli::main_with_args(std::env::args_os()));
}
