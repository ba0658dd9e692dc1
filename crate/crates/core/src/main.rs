fn main() {
    std::process::exit(fsdenet::cli::run(std::env::args_os()));
}
