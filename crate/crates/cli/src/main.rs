fn main() {
    std::process::exit(taptq_cli::run(std::env::args_os()));
}
