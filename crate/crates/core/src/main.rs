fn main() {
    std::process::exit(hfprune::cli::run(std::env::args_os()));
}
