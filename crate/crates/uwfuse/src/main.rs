fn main() {
    std::process::exit(uwfuse::cli::run(std::env::args_os()));
}
