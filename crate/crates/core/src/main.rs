fn main() {
    std::process::exit(assemai::cli::run(std::env::args_os()));
}
