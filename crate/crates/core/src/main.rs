fn main() {
    std::process::exit(cdiff::cli::run(std::env::args_os()));
}
