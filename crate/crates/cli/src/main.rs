fn main() {
    std::process::exit(degnet_cli::run(std::env::args_os().skip(1)));
}
