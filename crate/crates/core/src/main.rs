fn main() {
    std::process::exit(axai::cli::run(std::env::args_os()));
}
