fn main() {
    std::process::exit(smcsweep::cli::dispatch(std::env::args_os()));
}
