fn main() {
    std::process::exit(eblup_cli::run(std::env::args_os()));
}
