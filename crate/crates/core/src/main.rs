fn main() {
    std::process::exit(mambo::cli::main_with_args(std::env::args_os()));
}
