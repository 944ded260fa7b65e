fn main() {
    std::process::exit(fixpool_cli::main_with_args(std::env::args_os()));
}
