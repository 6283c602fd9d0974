fn main() {
    std::process::exit(dynfield_cli::run(std::env::args_os()));
}
