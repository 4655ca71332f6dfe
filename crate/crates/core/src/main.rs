fn main() {
    std::process::exit(spkcam::cli::run_from_env());
}
