fn main() {
    std::process::exit(flowpolicy_cli::run(std::env::args_os()));
}
