fn main() {
    std::process::exit(avem::cli::run(std::env::args_os()));
}
