fn main() {
    std::process::exit(koe::cli::dispatch(std::env::args_os()));
}
