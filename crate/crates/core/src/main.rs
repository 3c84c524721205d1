fn main() {
    std::process::exit(oodnorm::cli::main_with_args(std::env::args_os()));
}
