fn main() {
    std::process::exit(fbsde_cli::run_cli(std::env::args_os()));
}
