fn main() {
    std::process::exit(flowvo::cli::run(std::env::args_os()));
}
