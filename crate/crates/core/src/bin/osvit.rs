fn main() {
    std::process::exit(osvit::cli::run(std::env::args_os()));
}
