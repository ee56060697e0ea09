fn main() {
    std::process::exit(icportrait::cli::run(std::env::args_os().collect()));
}
