fn main() {
    std::process::exit(tpo_cli::main_with(std::env::args_os()));
}
