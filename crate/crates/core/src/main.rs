fn main() {
    std::process::exit(featlens::cli::dispatch(std::env::args_os()));
}
