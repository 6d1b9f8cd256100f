fn main() {
    std::process::exit(dum_cli::main_with_args(std::env::args_os()));
}
