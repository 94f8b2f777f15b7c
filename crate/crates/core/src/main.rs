fn main() {
    std::process::exit(ced_harness::cli::run(std::env::args_os()));
}
