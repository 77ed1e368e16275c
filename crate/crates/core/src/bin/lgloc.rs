fn main() {
    std::process::exit(lgloc::cli::run_command(std::env::args_os()));
}
