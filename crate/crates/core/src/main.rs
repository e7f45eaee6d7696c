fn main() {
    std::process::exit(mixmoe::cli::main_with(std::env::args_os()));
}
