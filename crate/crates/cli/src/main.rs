fn main() {
    std::process::exit(ftat_cli::run_cli(std::env::args_os()));
}
