fn main() {
    std::process::exit(forge_cli::run(std::env::args_os()));
}
