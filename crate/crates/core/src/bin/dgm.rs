fn main() {
    std::process::exit(dgm_core::cli::run(std::env::args_os()));
}
