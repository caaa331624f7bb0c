fn main() {
    std::process::exit(blocksynth::cli::run_from_args(std::env::args_os()));
}
