fn main() {
    std::process::exit(histosge::cli::run(std::env::args_os()));
}
