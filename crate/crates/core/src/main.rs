fn main() {
    std::process::exit(mimu::cli::run_cli(std::env::args_os()));
}
