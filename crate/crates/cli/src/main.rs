fn main() {
    std::process::exit(stylesearch_cli::run(std::env::args_os()));
}
