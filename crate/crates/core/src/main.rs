fn main() {
    std::process::exit(anchorpipe::cli::run(std::env::args_os()));
}
