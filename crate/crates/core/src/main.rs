fn main() {
    std::process::exit(lm_infinite::cli::parse_and_dispatch(std::env::args_os()));
}
