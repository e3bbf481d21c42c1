fn main() {
    std::process::exit(gbnn::cli::run(std::env::args_os()));
}
