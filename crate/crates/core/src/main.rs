fn main() {
    std::process::exit(atlasseg::cli::main_with(std::env::args_os()));
}
