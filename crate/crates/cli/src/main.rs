fn main() {
    std::process::exit(mmnets_cli::run_cli(std::env::args_os()));
}
