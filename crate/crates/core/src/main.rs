fn main() {
    std::process::exit(stylekit::cli::run(std::env::args_os()));
}
