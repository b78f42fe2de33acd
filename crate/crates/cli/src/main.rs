fn main() {
    std::process::exit(maskx_cli::run(std::env::args_os()));
}
