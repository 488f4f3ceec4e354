fn main() {
    std::process::exit(steinflow::cli::dispatch(std::env::args_os()));
}
