fn main() {
    std::process::exit(fmkit::cli::run(std::env::args_os()));
}
