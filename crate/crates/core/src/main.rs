fn main() {
    std::process::exit(persum_core::cli::run_command(std::env::args_os()));
}
