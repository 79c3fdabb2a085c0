fn main() {
    std::process::exit(mbmd::cli::run(std::env::args_os()));
}
