fn main() {
    std::process::exit(nest::cli::run(std::env::args_os()));
}
