fn main() {
    std::process::exit(rabc_cli::main_with(std::env::args_os()));
}
