fn main() {
    std::process::exit(cfx_cli::main_from(std::env::args_os()));
}
