fn main() {
    std::process::exit(escalate_server::cli::run(std::env::args_os()));
}
