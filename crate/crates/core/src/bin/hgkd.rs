fn main() {
    std::process::exit(hgkd::cli::main_with(std::env::args_os()));
}
