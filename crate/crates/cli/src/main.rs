fn main() {
    std::process::exit(latteo_cli::run(std::env::args_os()));
}
