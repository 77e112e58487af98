fn main() {
    std::process::exit(selfguide::cli::run(std::env::args_os()));
}
