fn main() {
    std::process::exit(klq::cli::run(std::env::args_os()));
}
