fn main() {
    std::process::exit(stackmac_cli::run(std::env::args_os()));
}
