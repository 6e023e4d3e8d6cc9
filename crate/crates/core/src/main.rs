fn main() {
    std::process::exit(sppdense::cli::run(std::env::args_os()));
}
