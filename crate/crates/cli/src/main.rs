fn main() {
    std::process::exit(scalpel_cli::main_with(std::env::args_os()));
}
