fn main() {
    std::process::exit(prism25d::cli::run(std::env::args_os()));
}
