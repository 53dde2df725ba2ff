fn main() {
    std::process::exit(wflow::cli::main_with_args(std::env::args_os()));
}
