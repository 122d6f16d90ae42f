fn main() {
    std::process::exit(lucf_cli::run(std::env::args_os()));
}
