fn main() {
    std::process::exit(epas_cli::main_with_args(std::env::args_os()));
}
