fn main() {
    std::process::exit(dmis::cli::run(std::env::args_os()));
}
