fn main() {
    std::process::exit(certignc_cli::main_with_args(std::env::args_os()));
}
