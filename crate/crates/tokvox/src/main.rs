fn main() {
    std::process::exit(tokvox::cli::run(std::env::args_os()));
}
