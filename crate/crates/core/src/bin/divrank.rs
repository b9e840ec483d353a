fn main() {
    std::process::exit(divrank::cli::main_with_args(std::env::args_os()));
}
