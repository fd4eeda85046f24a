fn main() {
    std::process::exit(dit_core::cli::main_with_args(std::env::args_os()));
}
