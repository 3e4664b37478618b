fn main() {
    std::process::exit(mope::cli::run_from_args(std::env::args_os()));
}
