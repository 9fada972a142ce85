fn main() {
    std::process::exit(latentomni::cli::run(std::env::args_os()));
}
