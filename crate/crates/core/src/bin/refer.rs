fn main() {
    std::process::exit(refer_core::cli::run(std::env::args_os()));
}
