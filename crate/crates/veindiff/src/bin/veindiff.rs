fn main() {
    std::process::exit(veindiff::cli::cli_main(std::env::args_os()));
}
