fn main() {
    std::process::exit(gcdnet::cli::main_with_args(std::env::args_os()));
}
