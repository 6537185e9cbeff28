fn main() {
    std::process::exit(qsdlab::cli::main_with_args(std::env::args_os()));
}
