fn main() {
    std::process::exit(dcilab::cli::run(std::env::args_os()));
}
