fn main() {
    std::process::exit(natmode_cli::run(std::env::args_os()));
}
