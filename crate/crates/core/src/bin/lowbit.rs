fn main() {
    std::process::exit(lowbit::cli::execute(std::env::args_os()));
}
