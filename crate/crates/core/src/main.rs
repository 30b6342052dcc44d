fn main() {
    std::process::exit(dpe::cli::run(std::env::args_os()));
}
