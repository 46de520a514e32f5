fn main() {
    std::process::exit(xigen::cli::run_cli(std::env::args_os()));
}
