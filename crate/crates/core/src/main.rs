fn main() {
    std::process::exit(ajepa::cli::run(std::env::args_os()));
}
