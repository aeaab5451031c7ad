fn main() {
    std::process::exit(fusion4ca_cli::main_with_args(std::env::args_os()));
}
