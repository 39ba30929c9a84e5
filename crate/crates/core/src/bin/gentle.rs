fn main() {
    std::process::exit(gentle::cli::main_with_args(std::env::args_os()));
}
