fn main() {
    std::process::exit(maskunet_cli::run(std::env::args_os()));
}
