fn main() {
    std::process::exit(flowscope_cli::run(std::env::args_os()));
}
