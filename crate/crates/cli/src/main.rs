fn main() {
    std::process::exit(evidx_cli::run(std::env::args_os()));
}
