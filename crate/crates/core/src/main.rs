fn main() {
    std::process::exit(aurlab::cli::run(std::env::args_os()));
}
