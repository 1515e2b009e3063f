fn main() {
    std::process::exit(reidkit::cli::run(std::env::args_os()));
}
