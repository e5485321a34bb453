fn main() {
    std::process::exit(whyv::cli::run(std::env::args_os()));
}
