fn main() {
    std::process::exit(modcomp_cli::cli::main_with(std::env::args_os()));
}
