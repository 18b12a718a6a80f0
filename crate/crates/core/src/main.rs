fn main() {
    std::process::exit(laep::cli::main_with_args(std::env::args_os()));
}
