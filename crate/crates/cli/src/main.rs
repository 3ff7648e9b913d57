fn main() {
    std::process::exit(flatmin_cli::main_with_args(std::env::args_os()));
}
