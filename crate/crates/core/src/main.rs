fn main() {
    std::process::exit(trajchain::cli::run(std::env::args_os()));
}
